#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>

#include "serann/dsp.hpp"
#include "serann/error.hpp"

namespace serann::dsp {
namespace {

std::uint32_t u32_at(const std::string& b, std::size_t pos) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + 3])) << 24;
}

std::uint16_t u16_at(const std::string& b, std::size_t pos) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[pos]) |
                                    static_cast<unsigned char>(b[pos + 1]) << 8);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

}  // namespace

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open audio file " + path.string());
  const std::string b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto fail = [&](const std::string& why) {
    return FormatError(path.string() + ": " + why);
  };
  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0) {
    throw fail("not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::string id = b.substr(pos, 4);
    const std::uint32_t size = u32_at(b, pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > b.size()) throw fail("chunk '" + id + "' runs past end of file");
    if (id == "fmt ") {
      if (size < 16) throw fail("fmt chunk too short");
      format = u16_at(b, body);
      channels = u16_at(b, body + 2);
      rate = u32_at(b, body + 4);
      bits = u16_at(b, body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      if (format != 1 || bits != 16) {
        throw fail("only 16-bit PCM is supported (format " + std::to_string(format) + ", " +
                   std::to_string(bits) + " bits)");
      }
      if (channels != 1) throw fail("expected mono audio, got " + std::to_string(channels) + " channels");
      if (rate != kSampleRate) {
        throw fail("expected 16000 Hz audio, got " + std::to_string(rate) + " Hz (no resampling)");
      }
      AudioClip clip;
      clip.sample_rate = static_cast<int>(rate);
      clip.samples.resize(size / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        clip.samples[i] = static_cast<std::int16_t>(u16_at(b, body + 2 * i)) / 32768.0;
      }
      return clip;
    }
    pos = body + size + (size & 1);
  }
  throw fail("no data chunk");
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  if (clip.sample_rate != kSampleRate) {
    throw PreconditionError("write_wav: only 16000 Hz audio is supported");
  }
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::string out = "RIFF";
  put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, kSampleRate);
  put_u32(out, kSampleRate * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, data_bytes);
  for (double s : clip.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32767.0))));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace serann::dsp
