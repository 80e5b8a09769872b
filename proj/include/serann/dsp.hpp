#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "serann/tensor.hpp"
#include "serann/types.hpp"

namespace serann::dsp {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kFftSize = 1024;
inline constexpr std::size_t kHopSize = 256;
inline constexpr std::size_t kWindowSize = 1024;
inline constexpr std::size_t kMelBands = 80;
inline constexpr std::size_t kMelFrames = 256;
inline constexpr double kMelMaxHz = 8000.0;
inline constexpr double kLogFloor = 1e-6;

/// Mono audio at 16 kHz with samples in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = kSampleRate;
};

/// Throws PreconditionError for a rate other than 16 kHz and
/// InsufficientAudioError for fewer samples than one STFT window.
void validate_clip(const AudioClip& clip);

/// 16-bit PCM mono 16 kHz only; anything else is rejected, never resampled.
AudioClip read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

/// Normalised log-Mel spectrogram, exactly 80 x 256 with entries in [-1, 1].
class MelSpec {
 public:
  explicit MelSpec(Tensor values);

  const Tensor& tensor() const { return values_; }
  double at(std::size_t band, std::size_t frame) const { return values_.at(band, frame); }

 private:
  Tensor values_;
};

/// Triangular HTK-mel filters over the rfft bins, [80, 513], 0 to 8 kHz.
Tensor mel_filterbank();

/// Periodic-Hann power spectrogram, [frames, 513], no centring.
Tensor power_spectrogram(const AudioClip& clip);

/// Linear Mel energies, [80, frames].
Tensor mel_power(const AudioClip& clip);

/// STFT -> Mel power -> zero-pad/truncate to 256 frames -> log(x + 1e-6)
/// -> per-utterance min-max scaling to [-1, 1] (constant input -> zeros).
MelSpec mel_spectrogram(const AudioClip& clip);

/// Mean of per-frame RMS over 25 ms frames with a 10 ms hop.
double average_energy(const AudioClip& clip);

/// Mean F0 over voiced frames, 0 when no frame is voiced. Per-frame F0 comes
/// from the normalised autocorrelation peak in 50-500 Hz; a frame is voiced
/// when that peak is >= 0.3 and the frame RMS is >= 0.01.
double average_pitch(const AudioClip& clip);

struct UtteranceFeatures {
  double avg_energy = 0.0;
  double avg_pitch_hz = 0.0;
  Gender gender = Gender::kUnknown;
};

UtteranceFeatures extract_features(const AudioClip& clip, Gender gender);

}  // namespace serann::dsp
