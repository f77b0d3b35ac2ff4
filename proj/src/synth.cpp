#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>

#include "dfca/data.hpp"

namespace dfca {

namespace fs = std::filesystem;

namespace {

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

std::vector<double> blur(const std::vector<double>& v, int s, double sigma) {
  if (sigma <= 0) return v;
  const int r = static_cast<int>(std::ceil(2.5 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& e : k) e /= total;
  auto pass = [&](const std::vector<double>& in, bool horizontal) {
    std::vector<double> out(in.size());
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          const int xx = std::clamp(horizontal ? x + i : x, 0, s - 1);
          const int yy = std::clamp(horizontal ? y : y + i, 0, s - 1);
          acc += k[static_cast<std::size_t>(i + r)] * in[static_cast<std::size_t>(yy * s + xx)];
        }
        out[static_cast<std::size_t>(y * s + x)] = acc;
      }
    return out;
  };
  return pass(pass(v, true), false);
}

}  // namespace

Image8 synth_image(const SynthConfig& cfg, LensClass cls, std::size_t sensor_index, std::uint64_t sample_seed) {
  const int s = cfg.image_size;
  if (s < 8) throw std::invalid_argument("synth image size must be >= 8");
  std::mt19937_64 rng(mix_seed(cfg.seed, sample_seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cx = s / 2.0 + (u(rng) - 0.5) * 0.12 * s;
  const double cy = s / 2.0 + (u(rng) - 0.5) * 0.12 * s;
  const double rp = s * (0.08 + 0.05 * u(rng));
  const double ri = s * (0.30 + 0.06 * u(rng));
  const double bg_phase = u(rng) * 6.283;
  struct Wave {
    double angular, radial, phase, amp;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 4; ++k)
    waves.push_back({std::round(cfg.ring_freq_lo + (cfg.ring_freq_hi - cfg.ring_freq_lo) * u(rng)), 2 + 6 * u(rng),
                     u(rng) * 6.283, 0.5 + 0.5 * u(rng)});
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> grain(static_cast<std::size_t>(s * s));
  for (auto& g : grain) g = gauss(rng);
  grain = blur(grain, s, 0.7);

  std::vector<double> v(static_cast<std::size_t>(s * s));
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double r = std::sqrt(dx * dx + dy * dy), th = std::atan2(dy, dx);
      double tex = 0;
      for (const auto& w : waves) tex += w.amp * std::sin(w.angular * th + w.radial * 6.283 * r / ri + w.phase);
      const double iris = 0.38 + 0.06 * tex / waves.size() * 4 + cfg.radial_noise * grain[static_cast<std::size_t>(y * s + x)];
      const double skin = 0.64 + 0.05 * std::sin(0.15 * x + 0.1 * y + bg_phase);
      double val = skin + (iris - skin) * (1 - smoothstep(ri - 1.0, ri + 1.0, r));
      val = 0.07 + (val - 0.07) * smoothstep(rp - 0.8, rp + 0.8, r);
      v[static_cast<std::size_t>(y * s + x)] = val;
    }

  std::mt19937_64 orng(mix_seed(sample_seed, 0xA77ACC + static_cast<std::uint64_t>(cls)));
  std::uniform_real_distribution<double> ou(0.0, 1.0);
  switch (cls) {
    case LensClass::textured: {
      const int p = std::max(2, cfg.lattice_period);
      const int ox = static_cast<int>(ou(orng) * p), oy = static_cast<int>(ou(orng) * p);
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double r = std::sqrt(dx * dx + dy * dy);
          const double band = smoothstep(rp * 1.1, rp * 1.4, r) * (1 - smoothstep(ri * 0.95, ri * 1.05, r));
          const bool dot = (x + ox) % p < (p + 1) / 2 && (y + oy) % p < (p + 1) / 2;
          v[static_cast<std::size_t>(y * s + x)] += cfg.lattice_contrast * band * (dot ? 1.0 : -0.6);
        }
      break;
    }
    case LensClass::soft: {
      const double edge = ri * (1.10 + 0.06 * ou(orng));
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double r = std::sqrt(dx * dx + dy * dy);
          const double film = 1 - smoothstep(edge - 1.5, edge + 0.5, r);
          const double rim = std::exp(-0.5 * (r - edge) * (r - edge) / 0.8);
          double& e = v[static_cast<std::size_t>(y * s + x)];
          e = e * (1 - cfg.film_alpha * film) + cfg.film_alpha * film * 0.72 - 0.12 * rim;
        }
      break;
    }
    case LensClass::print:
    case LensClass::scan: {
      const int p = std::max(2, cfg.halftone_period);
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const double cell = ((x % p) + (y % p) * p + 0.5) / (p * p);
          double& e = v[static_cast<std::size_t>(y * s + x)];
          e = 0.5 * e + 0.5 * (e > cell ? 0.9 : 0.1);
        }
      v = blur(v, s, cfg.blur_sigma * (cls == LensClass::scan ? 1.5 : 1.0));
      break;
    }
    case LensClass::normal:
      break;
  }

  const double gamma = 1.0 / (1.0 + 0.33 * static_cast<double>(sensor_index));
  const double noise = 0.012 + 0.02 * static_cast<double>(sensor_index);
  Image8 img;
  img.width = img.height = s;
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(s * s));
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double e = std::pow(std::clamp(v[i], 0.0, 1.0), gamma) + noise * gauss(rng);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(e, 0.0, 1.0) * 255.0));
  }
  return img;
}

std::vector<SampleRecord> synth_generate(const SynthConfig& cfg, const std::vector<int>& counts,
                                         const std::string& out_dir) {
  if (counts.empty() || counts.size() > all_lens_classes().size())
    throw std::invalid_argument("synth counts: expected up to 5 values (normal,soft,textured,print,scan)");
  long total = 0;
  for (int c : counts) {
    if (c < 0) throw std::invalid_argument("synth counts must be >= 0");
    total += c;
  }
  if (total == 0) throw std::invalid_argument("synth counts: nothing to generate (all counts are zero)");
  if (cfg.sensors.empty()) throw std::invalid_argument("synth: at least one sensor required");

  std::vector<SampleRecord> records;
  for (std::size_t si = 0; si < cfg.sensors.size(); ++si) {
    for (std::size_t ci = 0; ci < counts.size(); ++ci) {
      const LensClass cls = all_lens_classes()[ci];
      if (counts[ci] == 0) continue;
      const fs::path dir = fs::path(out_dir) / cfg.sensors[si] / lens_class_name(cls);
      fs::create_directories(dir);
      for (int i = 0; i < counts[ci]; ++i) {
        const std::uint64_t sample = mix_seed(mix_seed(si, ci), static_cast<std::uint64_t>(i));
        const fs::path file = dir / (std::to_string(i) + ".png");
        write_png(file.string(), synth_image(cfg, cls, si, sample));
        SampleRecord r;
        r.path = file.string();
        r.lens_class = cls;
        r.label = label_for(cls, RelabelPolicy{});
        r.sensor = cfg.sensors[si];
        r.dataset = cfg.dataset;
        records.push_back(std::move(r));
      }
    }
  }
  write_manifest((fs::path(out_dir) / "manifest.csv").string(), records, out_dir);
  return records;
}

}  // namespace dfca
