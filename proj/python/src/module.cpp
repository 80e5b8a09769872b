#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "serann/annotate.hpp"
#include "serann/corpus.hpp"
#include "serann/dsp.hpp"
#include "serann/error.hpp"
#include "serann/vqvae.hpp"

namespace py = pybind11;
using namespace serann;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

dsp::AudioClip to_clip(const Array& samples, int sample_rate) {
  if (samples.ndim() != 1) throw DimensionError("samples must be one-dimensional");
  dsp::AudioClip clip;
  clip.samples.assign(samples.data(), samples.data() + samples.size());
  clip.sample_rate = sample_rate;
  return clip;
}

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "serann native core";

  py::register_exception<Error>(m, "SerannError", PyExc_ValueError);

  m.def(
      "read_wav",
      [](const std::filesystem::path& path) {
        const auto clip = dsp::read_wav(path);
        Array out(static_cast<py::ssize_t>(clip.samples.size()));
        std::copy(clip.samples.begin(), clip.samples.end(), out.mutable_data());
        return py::make_tuple(out, clip.sample_rate);
      },
      py::arg("path"), "Read a 16-bit PCM mono WAV as (samples, sample_rate).");
  m.def(
      "mel_spectrogram",
      [](const Array& samples, int sample_rate) {
        return to_array(dsp::mel_spectrogram(to_clip(samples, sample_rate)).tensor());
      },
      py::arg("samples"), py::arg("sample_rate") = dsp::kSampleRate, "Normalised 80x256 log-Mel spectrogram.");
  m.def(
      "average_energy",
      [](const Array& samples, int sample_rate) { return dsp::average_energy(to_clip(samples, sample_rate)); },
      py::arg("samples"), py::arg("sample_rate") = dsp::kSampleRate);
  m.def(
      "average_pitch",
      [](const Array& samples, int sample_rate) { return dsp::average_pitch(to_clip(samples, sample_rate)); },
      py::arg("samples"), py::arg("sample_rate") = dsp::kSampleRate);
  m.def(
      "quantize",
      [](const Array& z, const Array& codebook) { return vqvae::quantize(to_tensor(z), to_tensor(codebook)).codes; },
      py::arg("z"), py::arg("codebook"), "Nearest codebook row index for each row of z.");
  m.def(
      "uar",
      [](const Array& confusion) {
        if (confusion.ndim() != 2 || confusion.shape(0) != 4 || confusion.shape(1) != 4) {
          throw DimensionError("confusion matrix must be 4x4");
        }
        corpus::ConfusionMatrix cm;
        for (std::size_t g = 0; g < 4; ++g) {
          for (std::size_t p = 0; p < 4; ++p) cm.add(g, p, static_cast<std::int64_t>(confusion.at(g, p)));
        }
        return corpus::uar(cm);
      },
      py::arg("confusion"), "Unweighted average recall of a gold x predicted count matrix.");
  m.def(
      "parse_label",
      [](std::string_view response) -> std::optional<std::string> {
        const auto e = annotate::parse_label(response);
        if (!e) return std::nullopt;
        return std::string(to_string(*e));
      },
      py::arg("response"), "Emotion named by an LLM reply, or None if unparseable.");
  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int rc;
        {
          py::gil_scoped_release release;
          rc = cli::run(args, out, err);
        }
        return py::make_tuple(rc, out.str(), err.str());
      },
      py::arg("args"), "Run a serann subcommand; returns (exit_code, stdout, stderr).");
}
