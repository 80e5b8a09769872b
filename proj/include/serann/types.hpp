#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace serann {

/// The four emotion classes. The numeric value is the classifier index.
enum class Emotion : int { kAngry = 0, kHappy = 1, kNeutral = 2, kSad = 3 };

inline constexpr std::size_t kNumEmotions = 4;
inline constexpr std::array<Emotion, kNumEmotions> kAllEmotions = {
    Emotion::kAngry, Emotion::kHappy, Emotion::kNeutral, Emotion::kSad};

std::string_view to_string(Emotion e);
/// Exact lower-case class name ("angry", "happy", "neutral", "sad").
std::optional<Emotion> parse_emotion(std::string_view name);
inline int class_index(Emotion e) { return static_cast<int>(e); }
Emotion emotion_from_index(int index);

enum class Gender { kMale, kFemale, kUnknown };

std::string_view to_string(Gender g);
std::optional<Gender> parse_gender(std::string_view name);

}  // namespace serann
