#pragma once

// Binary PPM (P6, maxval 255) read/write; P5 grayscale reads are replicated
// to 3 channels. Values map to [0,1] by /255 and back by round(255*x).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "emrf/image.hpp"

namespace emrf {

namespace detail {

struct PnmHeaderParser {
  const std::string& bytes;
  size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < bytes.size()) {
      char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  int64_t read_int(const std::string& path, const char* what) {
    skip_space_and_comments();
    size_t start = pos;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') ++pos;
    EMRF_CHECK(pos > start, path, ": malformed header, expected ", what,
               " at byte offset ", start);
    return std::stoll(bytes.substr(start, pos - start));
  }
};

}  // namespace detail

inline Image read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EMRF_CHECK(in.good(), "read_image: cannot open ", path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EMRF_CHECK(bytes.size() >= 2, path, ": truncated file");

  std::string magic = bytes.substr(0, 2);
  EMRF_CHECK(magic == "P6" || magic == "P5", path,
             ": unsupported magic \"", magic, "\" at byte offset 0 (want P6 or P5)");
  bool gray = magic == "P5";

  detail::PnmHeaderParser hp{bytes, 2};
  int64_t w = hp.read_int(path, "width");
  int64_t h = hp.read_int(path, "height");
  int64_t maxval = hp.read_int(path, "maxval");
  EMRF_CHECK(maxval == 255, path, ": unsupported maxval ", maxval, " at byte offset ",
             hp.pos, " (only 255 supported)");
  EMRF_CHECK(hp.pos < bytes.size(), path, ": truncated after header");
  ++hp.pos;  // single whitespace byte after maxval

  size_t payload = size_t(w * h) * (gray ? 1 : 3);
  EMRF_CHECK(bytes.size() - hp.pos >= payload, path, ": truncated payload at byte offset ",
             bytes.size(), ", need ", hp.pos + payload, " bytes");

  Tensor px({3, h, w});
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data() + hp.pos);
  int64_t hw = h * w;
  for (int64_t i = 0; i < hw; ++i) {
    if (gray) {
      double v = double(p[i]) / 255.0;
      px.data()[size_t(i)] = v;
      px.data()[size_t(hw + i)] = v;
      px.data()[size_t(2 * hw + i)] = v;
    } else {
      px.data()[size_t(i)] = double(p[3 * i]) / 255.0;
      px.data()[size_t(hw + i)] = double(p[3 * i + 1]) / 255.0;
      px.data()[size_t(2 * hw + i)] = double(p[3 * i + 2]) / 255.0;
    }
  }
  return make_image(std::move(px));
}

inline void write_image(const std::string& path, const Image& img) {
  EMRF_CHECK(img.channels() == 3, "write_image: expected 3 channels");
  std::ofstream out(path, std::ios::binary);
  EMRF_CHECK(out.good(), "write_image: cannot open ", path, " for writing");
  int64_t h = img.height(), w = img.width(), hw = h * w;
  out << "P6\n" << w << " " << h << "\n255\n";
  std::string payload(size_t(hw * 3), '\0');
  for (int64_t i = 0; i < hw; ++i)
    for (int64_t c = 0; c < 3; ++c) {
      double v = img.pixels.at(c * hw + i);
      v = std::min(1.0, std::max(0.0, v));
      payload[size_t(3 * i + c)] = char((unsigned char)std::lround(255.0 * v));
    }
  out.write(payload.data(), std::streamsize(payload.size()));
  EMRF_CHECK(out.good(), "write_image: write failed for ", path);
}

}  // namespace emrf
