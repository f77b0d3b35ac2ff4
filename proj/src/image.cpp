#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "dfca/data.hpp"

namespace dfca {

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Image8 read_png(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw std::runtime_error("'" + path + "': " + img.message);
  if (img.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&img);
    throw std::runtime_error("'" + path + "': 16-bit PNG is not supported");
  }
  const bool color = img.format & PNG_FORMAT_FLAG_COLOR;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = color ? 3 : 1;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  png_color background{0, 0, 0};
  if (!png_image_finish_read(&img, &background, out.pixels.data(), 0, nullptr))
    throw std::runtime_error("'" + path + "': " + img.message);
  return out;
}

template <class T>
T le(const std::string& b, std::size_t at) {
  if (at + sizeof(T) > b.size()) throw std::runtime_error("truncated BMP");
  T v;
  std::memcpy(&v, b.data() + at, sizeof(T));
  return v;
}

Image8 read_bmp(const std::string& path, const std::string& b) {
  const auto data_off = le<std::uint32_t>(b, 10);
  const auto header = le<std::uint32_t>(b, 14);
  const auto w = le<std::int32_t>(b, 18);
  const auto h_raw = le<std::int32_t>(b, 22);
  const auto bpp = le<std::uint16_t>(b, 28);
  const auto compression = le<std::uint32_t>(b, 30);
  if (compression != 0) throw std::runtime_error("'" + path + "': compressed BMP is not supported");
  if (bpp != 8 && bpp != 24) throw std::runtime_error("'" + path + "': BMP bit depth " + std::to_string(bpp) + " not supported");
  if (w <= 0 || h_raw == 0) throw std::runtime_error("'" + path + "': bad BMP dimensions");
  const bool top_down = h_raw < 0;
  const int h = std::abs(h_raw);
  const std::size_t stride = (static_cast<std::size_t>(w) * bpp / 8 + 3) & ~std::size_t{3};

  std::vector<std::uint8_t> palette;  // BGRA entries
  bool gray_palette = true;
  if (bpp == 8) {
    auto colors = le<std::uint32_t>(b, 46);
    if (colors == 0) colors = 256;
    const std::size_t at = 14 + header;
    if (at + colors * 4 > b.size()) throw std::runtime_error("'" + path + "': truncated BMP palette");
    palette.assign(b.begin() + static_cast<std::ptrdiff_t>(at), b.begin() + static_cast<std::ptrdiff_t>(at + colors * 4));
    for (std::size_t i = 0; i < colors; ++i)
      gray_palette = gray_palette && palette[i * 4] == palette[i * 4 + 1] && palette[i * 4] == palette[i * 4 + 2];
  }
  if (data_off + stride * static_cast<std::size_t>(h) > b.size())
    throw std::runtime_error("'" + path + "': truncated BMP pixel data");

  Image8 out;
  out.width = w;
  out.height = h;
  out.channels = bpp == 8 && gray_palette ? 1 : 3;
  out.pixels.resize(static_cast<std::size_t>(w) * h * out.channels);
  for (int y = 0; y < h; ++y) {
    const auto* row = reinterpret_cast<const std::uint8_t*>(b.data()) + data_off +
                      stride * static_cast<std::size_t>(top_down ? y : h - 1 - y);
    for (int x = 0; x < w; ++x) {
      auto* px = &out.pixels[(static_cast<std::size_t>(y) * w + x) * out.channels];
      if (bpp == 24) {
        px[0] = row[x * 3 + 2];
        px[1] = row[x * 3 + 1];
        px[2] = row[x * 3];
      } else {
        const std::size_t i = row[x];
        if (i * 4 >= palette.size()) throw std::runtime_error("'" + path + "': palette index out of range");
        if (out.channels == 1) {
          px[0] = palette[i * 4];
        } else {
          px[0] = palette[i * 4 + 2];
          px[1] = palette[i * 4 + 1];
          px[2] = palette[i * 4];
        }
      }
    }
  }
  return out;
}

double sample_bilinear(const std::vector<double>& src, int h, int w, int c, double y, double x, int k) {
  // Zero outside the image.
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0, fx = x - x0;
  auto px = [&](int yy, int xx) {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return src[(static_cast<std::size_t>(yy) * w + xx) * c + k];
  };
  return (px(y0, x0) * (1 - fx) + px(y0, x0 + 1) * fx) * (1 - fy) + (px(y0 + 1, x0) * (1 - fx) + px(y0 + 1, x0 + 1) * fx) * fy;
}

}  // namespace

Image8 read_image(const std::string& path) {
  const std::string head = [&] {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image '" + path + "'");
    char buf[8] = {};
    in.read(buf, 8);
    return std::string(buf, static_cast<std::size_t>(in.gcount()));
  }();
  static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (head.size() == 8 && std::memcmp(head.data(), png_sig, 8) == 0) return read_png(path);
  if (head.size() >= 2 && head[0] == 'B' && head[1] == 'M') return read_bmp(path, slurp(path));
  throw std::runtime_error("'" + path + "': unsupported image format (PNG or BMP expected)");
}

void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: 1 or 3 channels required");
  png_image p;
  std::memset(&p, 0, sizeof p);
  p.version = PNG_IMAGE_VERSION;
  p.width = static_cast<png_uint_32>(img.width);
  p.height = static_cast<png_uint_32>(img.height);
  p.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&p, path.c_str(), 0, img.pixels.data(), 0, nullptr))
    throw std::runtime_error("cannot write '" + path + "': " + p.message);
}

void write_bmp(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_bmp: 1 or 3 channels required");
  const int bpp = img.channels == 1 ? 8 : 24;
  const std::uint32_t stride = (static_cast<std::uint32_t>(img.width) * bpp / 8 + 3) & ~3u;
  const std::uint32_t palette = bpp == 8 ? 256 * 4 : 0;
  const std::uint32_t off = 14 + 40 + palette;
  std::string out;
  auto put32 = [&](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  auto put16 = [&](std::uint16_t v) { out.append(reinterpret_cast<const char*>(&v), 2); };
  out += "BM";
  put32(off + stride * static_cast<std::uint32_t>(img.height));
  put32(0);
  put32(off);
  put32(40);
  put32(static_cast<std::uint32_t>(img.width));
  put32(static_cast<std::uint32_t>(img.height));
  put16(1);
  put16(static_cast<std::uint16_t>(bpp));
  put32(0);
  put32(stride * static_cast<std::uint32_t>(img.height));
  put32(2835);
  put32(2835);
  put32(bpp == 8 ? 256 : 0);
  put32(0);
  for (std::uint32_t i = 0; i < palette / 4; ++i) {
    const char g = static_cast<char>(i);
    out += {g, g, g, 0};
  }
  for (int y = img.height - 1; y >= 0; --y) {
    std::string row(stride, '\0');
    for (int x = 0; x < img.width; ++x) {
      const auto* px = &img.pixels[(static_cast<std::size_t>(y) * img.width + x) * img.channels];
      if (bpp == 8) {
        row[static_cast<std::size_t>(x)] = static_cast<char>(px[0]);
      } else {
        row[static_cast<std::size_t>(x) * 3] = static_cast<char>(px[2]);
        row[static_cast<std::size_t>(x) * 3 + 1] = static_cast<char>(px[1]);
        row[static_cast<std::size_t>(x) * 3 + 2] = static_cast<char>(px[0]);
      }
    }
    out += row;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Tensor to_tensor_resized(const Image8& img, int out_h, int out_w) {
  if (img.width <= 0 || img.height <= 0 || (img.channels != 1 && img.channels != 3))
    throw std::invalid_argument("to_tensor_resized: empty image or unsupported channel count");
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("to_tensor_resized: bad target size");
  const int h = img.height, w = img.width, c = img.channels;
  Tensor out = Tensor::zeros({out_h, out_w, 3}, DType::f32);
  auto dst = out.mutable_data<float>();
  auto axis = [](int o, int in, int out_n, int& i0, int& i1) {
    double src = (o + 0.5) * in / out_n - 0.5;
    if (src < 0) src = 0;
    i0 = std::min(static_cast<int>(src), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    return src - i0;
  };
  for (int y = 0; y < out_h; ++y) {
    int y0, y1;
    const double fy = axis(y, h, out_h, y0, y1);
    for (int x = 0; x < out_w; ++x) {
      int x0, x1;
      const double fx = axis(x, w, out_w, x0, x1);
      for (int k = 0; k < 3; ++k) {
        const int ch = c == 1 ? 0 : k;
        auto p = [&](int yy, int xx) { return static_cast<double>(img.pixels[(static_cast<std::size_t>(yy) * w + xx) * c + ch]); };
        const double v = (p(y0, x0) * (1 - fx) + p(y0, x1) * fx) * (1 - fy) + (p(y1, x0) * (1 - fx) + p(y1, x1) * fx) * fy;
        dst[(static_cast<std::size_t>(y) * out_w + x) * 3 + k] = static_cast<float>(std::clamp(v / 255.0, 0.0, 1.0));
      }
    }
  }
  return out;
}

Tensor decode_and_resize(const std::string& path, int out_h, int out_w) {
  return to_tensor_resized(read_image(path), out_h, out_w);
}

Tensor affine_warp(const Tensor& img, double tx, double ty, double shear_degrees) {
  if (img.rank() != 3) throw std::invalid_argument("affine_warp: expected [H,W,C], got " + shape_str(img.shape()));
  const int h = static_cast<int>(img.dim(0)), w = static_cast<int>(img.dim(1)), c = static_cast<int>(img.dim(2));
  const auto src = img.to_vector();
  const double sh = std::tan(shear_degrees * M_PI / 180.0);
  const double cy = (h - 1) / 2.0;
  std::vector<double> out(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sy = y - ty;
      const double sx = x - tx - sh * (y - cy);
      for (int k = 0; k < c; ++k) out[(static_cast<std::size_t>(y) * w + x) * c + k] = sample_bilinear(src, h, w, c, sy, sx, k);
    }
  return Tensor::from(img.shape(), out, img.dtype());
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Tensor augment(const Tensor& img, const AugmentConfig& cfg, std::uint64_t per_sample_seed) {
  if (cfg.shift_fraction == 0.0 && cfg.shear_degrees == 0.0) return img.detach();
  std::mt19937_64 rng(mix_seed(cfg.seed, per_sample_seed));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double tx = u(rng) * cfg.shift_fraction * static_cast<double>(img.dim(1));
  const double ty = u(rng) * cfg.shift_fraction * static_cast<double>(img.dim(0));
  const double shear = u(rng) * cfg.shear_degrees;
  return affine_warp(img, tx, ty, shear);
}

}  // namespace dfca
