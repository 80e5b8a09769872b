#include <cmath>
#include <cstdio>
#include <numbers>

#include "serann/corpus.hpp"
#include "serann/dsp.hpp"
#include "serann/error.hpp"
#include "serann/rng.hpp"

namespace serann::corpus {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Voice {
  double pitch_ratio;
  double amplitude;
  int harmonics;
  double rolloff;
};

Voice voice_for(Emotion e) {
  switch (e) {
    case Emotion::kAngry:
      return {1.25, 0.70, 14, 0.85};
    case Emotion::kHappy:
      return {1.55, 0.50, 8, 0.70};
    case Emotion::kNeutral:
      return {1.00, 0.30, 5, 0.50};
    case Emotion::kSad:
      return {0.80, 0.15, 2, 0.30};
  }
  return {1.0, 0.3, 5, 0.5};
}

std::string padded(std::size_t v, int width) {
  std::string s = std::to_string(v);
  return std::string(width > static_cast<int>(s.size()) ? width - s.size() : 0, '0') + s;
}

// 40 ms raised-cosine fade at both ends.
void apply_fade(std::vector<double>& x) {
  const std::size_t fade = std::min<std::size_t>(640, x.size() / 2);
  for (std::size_t n = 0; n < fade; ++n) {
    const double g = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n) / static_cast<double>(fade));
    x[n] *= g;
    x[x.size() - 1 - n] *= g;
  }
}

std::vector<double> voiced_clip(double f0, const Voice& v, std::size_t samples, Rng& rng) {
  std::vector<double> x(samples, 0.0);
  double norm = 0.0;
  for (int h = 0; h < v.harmonics; ++h) norm += std::pow(v.rolloff, h);
  const double drift = rng.uniform(-0.03, 0.03);
  double phase = 0.0;
  for (std::size_t n = 0; n < samples; ++n) {
    const double t = static_cast<double>(n) / static_cast<double>(samples);
    const double f = f0 * (1.0 + drift * t);
    phase += kTwoPi * f / dsp::kSampleRate;
    double s = 0.0;
    for (int h = 0; h < v.harmonics; ++h) {
      if (f * (h + 1) >= 7800.0) break;  // stay below the top Mel band edge
      s += std::pow(v.rolloff, h) * std::sin(phase * (h + 1));
    }
    x[n] = v.amplitude * s / norm + 0.005 * rng.normal();
  }
  apply_fade(x);
  return x;
}

}  // namespace

const std::vector<std::string>& synthetic_keywords(Emotion e) {
  static const std::vector<std::string> angry = {"furious", "hate", "outrageous", "stop"};
  static const std::vector<std::string> happy = {"great", "wonderful", "love", "fantastic"};
  static const std::vector<std::string> neutral = {"okay", "meeting", "schedule", "tuesday"};
  static const std::vector<std::string> sad = {"miss", "lost", "lonely", "sorry"};
  switch (e) {
    case Emotion::kAngry:
      return angry;
    case Emotion::kHappy:
      return happy;
    case Emotion::kNeutral:
      return neutral;
    case Emotion::kSad:
      return sad;
  }
  return neutral;
}

std::vector<UtteranceRecord> generate_synthetic_corpus(const std::filesystem::path& dir,
                                                       const SyntheticCorpusOptions& options) {
  if (options.speakers < 1 || options.per_class_per_speaker < 1) {
    throw PreconditionError("synthetic corpus needs at least one speaker and one utterance per class");
  }
  const auto speakers = options.speakers;
  auto n_test = static_cast<std::size_t>(std::floor(options.test_fraction * speakers + 0.5));
  auto n_val = static_cast<std::size_t>(std::floor(options.val_fraction * speakers + 0.5));
  while (n_test + n_val >= speakers && (n_test > 0 || n_val > 0)) {
    if (n_val > 0) {
      --n_val;
    } else {
      --n_test;
    }
  }

  std::filesystem::create_directories(dir / "wav");
  const std::vector<std::string> filler = {"the", "report", "about", "today", "was", "really"};
  std::vector<UtteranceRecord> records;
  Rng root(options.seed);
  for (std::size_t s = 0; s < speakers; ++s) {
    Rng speaker_rng = root.fork(s + 1);
    const bool male = s % 2 == 0;
    const double base_f0 = male ? speaker_rng.uniform(105.0, 130.0) : speaker_rng.uniform(185.0, 225.0);
    const std::string speaker_id = options.id_prefix + "_spk" + padded(s, 2);
    std::string split = "train";
    if (s >= speakers - n_test) {
      split = "test";
    } else if (s >= speakers - n_test - n_val) {
      split = "val";
    }
    for (Emotion e : kAllEmotions) {
      for (std::size_t u = 0; u < options.per_class_per_speaker; ++u) {
        const Voice v = voice_for(e);
        const double f0 = base_f0 * v.pitch_ratio * speaker_rng.uniform(0.96, 1.04);
        const double secs = options.seconds * speaker_rng.uniform(0.85, 1.15);
        const auto samples = std::max<std::size_t>(dsp::kWindowSize, static_cast<std::size_t>(secs * dsp::kSampleRate));

        UtteranceRecord r;
        r.utterance_id = speaker_id + "_" + std::string(to_string(e)) + "_" + padded(u, 3);
        r.audio_path = dir / "wav" / (r.utterance_id + ".wav");
        const auto& words = synthetic_keywords(e);
        r.transcript = filler[speaker_rng.below(filler.size())] + " " + words[speaker_rng.below(words.size())] +
                       " " + filler[speaker_rng.below(filler.size())] + " " +
                       words[speaker_rng.below(words.size())];
        r.speaker_id = speaker_id;
        r.gender = male ? Gender::kMale : Gender::kFemale;
        r.corpus = options.corpus;
        r.gold_label = e;
        r.split = split;

        dsp::AudioClip clip;
        clip.samples = voiced_clip(f0, v, samples, speaker_rng);
        dsp::write_wav(r.audio_path, clip);
        records.push_back(std::move(r));
      }
    }
  }
  write_manifest(dir / "manifest.jsonl", records);
  return records;
}

std::vector<UtteranceRecord> generate_pattern_corpus(const std::filesystem::path& dir, std::size_t per_pattern,
                                                     std::uint64_t seed) {
  std::filesystem::create_directories(dir / "wav");
  // 4.2 s gives 259 STFT frames, so no clip is padded.
  constexpr std::size_t kSamples = 67200;
  Rng root(seed);
  std::vector<UtteranceRecord> records;
  for (const std::string pattern : {"low", "high"}) {
    for (std::size_t i = 0; i < per_pattern; ++i) {
      Rng rng = root.fork(fnv1a(pattern) ^ i);
      dsp::AudioClip clip;
      clip.samples.assign(kSamples, 0.0);
      if (pattern == "low") {
        const double f0 = rng.uniform(230.0, 270.0);
        const double amp = rng.uniform(0.3, 0.6);
        for (std::size_t n = 0; n < kSamples; ++n) {
          const double t = static_cast<double>(n) / dsp::kSampleRate;
          clip.samples[n] = amp * (0.7 * std::sin(kTwoPi * f0 * t) + 0.3 * std::sin(kTwoPi * 2.0 * f0 * t));
        }
      } else {
        const double amp = rng.uniform(0.3, 0.6);
        constexpr int kPartials = 40;
        std::vector<double> freq(kPartials), phase(kPartials);
        for (int p = 0; p < kPartials; ++p) {
          freq[p] = rng.uniform(4000.0, 6000.0);
          phase[p] = rng.uniform(0.0, kTwoPi);
        }
        for (std::size_t n = 0; n < kSamples; ++n) {
          const double t = static_cast<double>(n) / dsp::kSampleRate;
          double s = 0.0;
          for (int p = 0; p < kPartials; ++p) s += std::sin(kTwoPi * freq[p] * t + phase[p]);
          clip.samples[n] = amp * s / std::sqrt(static_cast<double>(kPartials)) / 2.0;
        }
      }
      for (double& s : clip.samples) s += 0.002 * rng.normal();
      apply_fade(clip.samples);

      UtteranceRecord r;
      r.utterance_id = "pattern_" + pattern + "_" + padded(i, 3);
      r.audio_path = dir / "wav" / (r.utterance_id + ".wav");
      r.transcript = pattern;
      r.speaker_id = "pattern_" + pattern;
      r.corpus = CorpusId::kSynthetic;
      r.split = pattern;
      dsp::write_wav(r.audio_path, clip);
      records.push_back(std::move(r));
    }
  }
  write_manifest(dir / "manifest.jsonl", records);
  return records;
}

}  // namespace serann::corpus
