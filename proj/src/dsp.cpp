#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>

#include "serann/dsp.hpp"
#include "serann/error.hpp"

namespace serann::dsp {
namespace {

constexpr std::size_t kBins = kFftSize / 2 + 1;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

/// One r2c plan shared by all callers. Planning is serialised; execution
/// through fftw_execute_dft_r2c on caller-owned buffers is thread-safe.
class RealFft {
 public:
  static const RealFft& instance() {
    static const RealFft fft;
    return fft;
  }

  void forward(double* in, fftw_complex* out) const { fftw_execute_dft_r2c(plan_, in, out); }

 private:
  RealFft() {
    static std::mutex planner_mutex;
    std::lock_guard lock(planner_mutex);
    std::unique_ptr<double, FftwFree> in(fftw_alloc_real(kFftSize));
    std::unique_ptr<fftw_complex, FftwFree> out(fftw_alloc_complex(kBins));
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(kFftSize), in.get(), out.get(), FFTW_ESTIMATE);
  }
  ~RealFft() { fftw_destroy_plan(plan_); }

  fftw_plan plan_;
};

const std::vector<double>& periodic_hann() {
  static const std::vector<double> window = [] {
    std::vector<double> w(kWindowSize);
    for (std::size_t n = 0; n < kWindowSize; ++n) {
      w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                  static_cast<double>(kWindowSize));
    }
    return w;
  }();
  return window;
}

double frame_rms(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(n));
}

}  // namespace

void validate_clip(const AudioClip& clip) {
  if (clip.sample_rate != kSampleRate) {
    throw PreconditionError("audio must be sampled at 16000 Hz, got " +
                            std::to_string(clip.sample_rate));
  }
  if (clip.samples.size() < kWindowSize) {
    throw InsufficientAudioError("clip has " + std::to_string(clip.samples.size()) +
                                 " samples; at least one 1024-sample window is required");
  }
}

MelSpec::MelSpec(Tensor values) : values_(std::move(values)) {
  expect_shape(values_, {kMelBands, kMelFrames}, "MelSpec");
  for (double v : values_.values()) {
    if (!(v >= -1.0 && v <= 1.0)) throw NumericError("MelSpec entry outside [-1, 1]");
  }
}

Tensor mel_filterbank() {
  Tensor fb({kMelBands, kBins});
  const double mel_max = hz_to_mel(kMelMaxHz);
  std::vector<double> edges(kMelBands + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(kMelBands + 1));
  }
  for (std::size_t m = 0; m < kMelBands; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < kBins; ++k) {
      const double f = static_cast<double>(k) * kSampleRate / static_cast<double>(kFftSize);
      double w = 0.0;
      if (f > lo && f < mid) {
        w = (f - lo) / (mid - lo);
      } else if (f >= mid && f < hi) {
        w = (hi - f) / (hi - mid);
      }
      fb.at(m, k) = w;
    }
  }
  return fb;
}

Tensor power_spectrogram(const AudioClip& clip) {
  validate_clip(clip);
  const std::size_t frames = 1 + (clip.samples.size() - kWindowSize) / kHopSize;
  Tensor power({frames, kBins});
  const auto& window = periodic_hann();
  std::unique_ptr<double, FftwFree> in(fftw_alloc_real(kFftSize));
  std::unique_ptr<fftw_complex, FftwFree> out(fftw_alloc_complex(kBins));
  const RealFft& fft = RealFft::instance();
  for (std::size_t t = 0; t < frames; ++t) {
    const double* src = clip.samples.data() + t * kHopSize;
    for (std::size_t n = 0; n < kFftSize; ++n) in.get()[n] = src[n] * window[n];
    fft.forward(in.get(), out.get());
    for (std::size_t k = 0; k < kBins; ++k) {
      const double re = out.get()[k][0], im = out.get()[k][1];
      power.at(t, k) = re * re + im * im;
    }
  }
  return power;
}

Tensor mel_power(const AudioClip& clip) {
  static const Tensor fb = mel_filterbank();
  const Tensor power = power_spectrogram(clip);
  const std::size_t frames = power.dim(0);
  Tensor mel({kMelBands, frames});
  for (std::size_t m = 0; m < kMelBands; ++m) {
    const double* w = fb.data() + m * kBins;
    for (std::size_t t = 0; t < frames; ++t) {
      const double* p = power.data() + t * kBins;
      double s = 0.0;
      for (std::size_t k = 0; k < kBins; ++k) s += w[k] * p[k];
      mel.at(m, t) = s;
    }
  }
  return mel;
}

MelSpec mel_spectrogram(const AudioClip& clip) {
  const Tensor mel = mel_power(clip);
  const std::size_t frames = std::min(mel.dim(1), kMelFrames);
  // Frames beyond the clip keep zero power, i.e. log(kLogFloor).
  Tensor out({kMelBands, kMelFrames}, std::log(kLogFloor));
  for (std::size_t m = 0; m < kMelBands; ++m) {
    for (std::size_t t = 0; t < frames; ++t) out.at(m, t) = std::log(mel.at(m, t) + kLogFloor);
  }
  const auto [lo_it, hi_it] = std::minmax_element(out.values().begin(), out.values().end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi - lo <= 0.0) {
    out.fill(0.0);
  } else {
    for (auto& v : out.values()) v = std::clamp(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0);
  }
  return MelSpec(std::move(out));
}

double average_energy(const AudioClip& clip) {
  validate_clip(clip);
  constexpr std::size_t frame = 400, hop = 160;
  const std::size_t frames = 1 + (clip.samples.size() - frame) / hop;
  double total = 0.0;
  for (std::size_t t = 0; t < frames; ++t) total += frame_rms(clip.samples.data() + t * hop, frame);
  return total / static_cast<double>(frames);
}

double average_pitch(const AudioClip& clip) {
  validate_clip(clip);
  constexpr std::size_t frame = 640, hop = 160;
  constexpr std::size_t min_lag = kSampleRate / 500, max_lag = kSampleRate / 50;
  constexpr double voicing_threshold = 0.3, rms_threshold = 0.01;
  const auto& x = clip.samples;
  if (x.size() < frame + max_lag) return 0.0;
  const std::size_t frames = 1 + (x.size() - frame - max_lag) / hop;

  std::vector<double> r(max_lag + 2, 0.0);
  double sum_f0 = 0.0;
  std::size_t voiced = 0;
  for (std::size_t t = 0; t < frames; ++t) {
    const double* s = x.data() + t * hop;
    if (frame_rms(s, frame) < rms_threshold) continue;
    double e0 = 0.0;
    for (std::size_t n = 0; n < frame; ++n) e0 += s[n] * s[n];
    double best = -1.0;
    for (std::size_t lag = min_lag - 1; lag <= max_lag + 1; ++lag) {
      double num = 0.0, e1 = 0.0;
      for (std::size_t n = 0; n < frame; ++n) {
        num += s[n] * s[n + lag];
        e1 += s[n + lag] * s[n + lag];
      }
      r[lag - (min_lag - 1)] = (e0 > 0.0 && e1 > 0.0) ? num / std::sqrt(e0 * e1) : 0.0;
      if (lag >= min_lag && lag <= max_lag) best = std::max(best, r[lag - (min_lag - 1)]);
    }
    if (best < voicing_threshold) continue;

    // First local maximum close to the global one, which avoids picking a
    // sub-harmonic of a strongly periodic frame.
    const auto rv = [&](std::size_t lag) { return r[lag - (min_lag - 1)]; };
    std::size_t pick = 0;
    for (std::size_t lag = min_lag; lag <= max_lag; ++lag) {
      if (rv(lag) >= 0.9 * best && rv(lag) >= rv(lag - 1) && rv(lag) >= rv(lag + 1)) {
        pick = lag;
        break;
      }
    }
    if (pick == 0) continue;
    const double a = rv(pick - 1), b = rv(pick), c = rv(pick + 1);
    const double denom = a - 2.0 * b + c;
    const double shift = denom != 0.0 ? std::clamp(0.5 * (a - c) / denom, -0.5, 0.5) : 0.0;
    const double f0 = kSampleRate / (static_cast<double>(pick) + shift);
    if (f0 < 50.0 || f0 > 500.0) continue;
    sum_f0 += f0;
    ++voiced;
  }
  return voiced ? sum_f0 / static_cast<double>(voiced) : 0.0;
}

UtteranceFeatures extract_features(const AudioClip& clip, Gender gender) {
  return {average_energy(clip), average_pitch(clip), gender};
}

}  // namespace serann::dsp
