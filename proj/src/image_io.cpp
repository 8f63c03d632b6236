#include "fvae/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "fvae/binary_io.hpp"

namespace fvae {
namespace {

class HeaderScanner {
 public:
  explicit HeaderScanner(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (1u << 30)) throw ParseError(std::string("pnm: ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) {
      throw ParseError(std::string("pnm: expected ") + what, start);
    }
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_pnm(const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw std::invalid_argument("write_image: only 1 or 3 channels are supported");
  }
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw std::invalid_argument("write_image: pixel buffer does not match extents");
  }
  ByteWriter w;
  w.raw(image.channels == 1 ? "P5\n" : "P6\n");
  w.raw(std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n");
  auto out = w.take();
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

Image8 decode_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError("pnm: bad magic, expected P5 or P6", 0);
  }
  Image8 img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  HeaderScanner s(bytes);
  s.advance(2);
  img.width = s.number("width");
  img.height = s.number("height");
  s.skip_space_and_comments();
  const std::size_t maxval_at = s.pos();
  const std::size_t maxval = s.number("maxval");
  if (maxval != 255) {
    throw ParseError("pnm: maxval must be 255, got " + std::to_string(maxval), maxval_at);
  }
  if (img.width == 0 || img.height == 0) throw ParseError("pnm: zero extent", maxval_at);
  if (s.pos() >= bytes.size() || !std::isspace(bytes[s.pos()])) {
    throw ParseError("pnm: expected whitespace after maxval", s.pos());
  }
  s.advance(1);
  const std::size_t need = img.width * img.height * img.channels;
  if (bytes.size() - s.pos() < need) {
    throw ParseError("pnm: truncated pixel data, expected " + std::to_string(need) + " bytes",
                     bytes.size());
  }
  img.pixels.assign(bytes.begin() + s.pos(), bytes.begin() + s.pos() + need);
  return img;
}

Image8 read_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_pnm(bytes);
}

void write_image(const std::filesystem::path& path, const Image8& image) {
  write_file_atomic(path, encode_pnm(image));
}

Tensor normalize(const Image8& image) {
  Tensor out(Shape{image.channels, image.height, image.width});
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c) {
        out.at(c, y, x) =
            static_cast<float>(image.pixels[(y * image.width + x) * image.channels + c]) / 127.5f - 1.0f;
      }
  return out;
}

Image8 denormalize(const Tensor& chw) {
  if (chw.rank() != 3) {
    throw std::invalid_argument("denormalize: expected CHW tensor, got " + shape_string(chw.shape()));
  }
  Image8 img{chw.dim(2), chw.dim(1), chw.dim(0), {}};
  img.pixels.resize(chw.size());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const float v = std::round((chw.at(c, y, x) + 1.0f) * 127.5f);
        img.pixels[(y * img.width + x) * img.channels + c] =
            static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
      }
  return img;
}

}  // namespace fvae
