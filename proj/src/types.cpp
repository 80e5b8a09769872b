#include "serann/types.hpp"

#include "serann/error.hpp"

namespace serann {

std::string_view to_string(Emotion e) {
  switch (e) {
    case Emotion::kAngry:
      return "angry";
    case Emotion::kHappy:
      return "happy";
    case Emotion::kNeutral:
      return "neutral";
    case Emotion::kSad:
      return "sad";
  }
  return "?";
}

std::optional<Emotion> parse_emotion(std::string_view name) {
  for (Emotion e : kAllEmotions) {
    if (to_string(e) == name) return e;
  }
  return std::nullopt;
}

Emotion emotion_from_index(int index) {
  if (index < 0 || index >= static_cast<int>(kNumEmotions)) {
    throw PreconditionError("emotion class index out of range: " + std::to_string(index));
  }
  return static_cast<Emotion>(index);
}

std::string_view to_string(Gender g) {
  switch (g) {
    case Gender::kMale:
      return "male";
    case Gender::kFemale:
      return "female";
    case Gender::kUnknown:
      return "unknown";
  }
  return "unknown";
}

std::optional<Gender> parse_gender(std::string_view name) {
  if (name == "male" || name == "M" || name == "m") return Gender::kMale;
  if (name == "female" || name == "F" || name == "f") return Gender::kFemale;
  if (name == "unknown" || name.empty()) return Gender::kUnknown;
  return std::nullopt;
}

}  // namespace serann
