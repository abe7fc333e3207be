#include "rrca/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rrca/random.hpp"

namespace fs = std::filesystem;

namespace rrca {

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
bool header_token(std::istream& in, std::string& tok) {
  tok.clear();
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) break;
  }
  if (c == EOF) return false;
  tok.push_back(static_cast<char>(c));
  while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#') tok.push_back(static_cast<char>(in.get()));
  return true;
}

int header_int(std::istream& in, const fs::path& path, const char* field) {
  std::string tok;
  if (!header_token(in, tok) || tok.empty() ||
      !std::all_of(tok.begin(), tok.end(), [](unsigned char ch) { return std::isdigit(ch); }) ||
      tok.size() > 6) {
    throw DataError(DataErrorKind::BadHeader,
                    path.string() + ": malformed PGM header (bad " + field + ")");
  }
  return std::stoi(tok);
}

// Index into [0, n) under mirror reflection without edge repeat.
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

template <typename T>
Grid<T> pad_reflect(const Grid<T>& g, int th, int tw) {
  if (g.h >= th && g.w >= tw) return g;
  const int H = std::max(g.h, th), W = std::max(g.w, tw);
  const int top = (H - g.h) / 2, left = (W - g.w) / 2;
  Grid<T> out(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) out.at(y, x) = g.at(reflect(y - top, g.h), reflect(x - left, g.w));
  return out;
}

template <typename T>
Grid<T> transform(const Grid<T>& g, bool hflip, bool vflip, int oy, int ox, int crop) {
  Grid<T> out(crop, crop);
  for (int y = 0; y < crop; ++y) {
    for (int x = 0; x < crop; ++x) {
      int sy = oy + y, sx = ox + x;
      if (vflip) sy = g.h - 1 - sy;
      if (hflip) sx = g.w - 1 - sx;
      out.at(y, x) = g.at(sy, sx);
    }
  }
  return out;
}

// Separable Gaussian blur with reflected borders.
void gaussian_blur(std::vector<double>& img, int n, double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double ks = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= ks;
  std::vector<double> tmp(img.size());
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * img[y * n + reflect(x + i, n)];
      tmp[y * n + x] = s;
    }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[reflect(y + i, n) * n + x];
      img[y * n + x] = s;
    }
}

}  // namespace

Grid<std::uint8_t> read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrorKind::MissingFile, path.string() + ": cannot open file");
  std::string magic;
  if (!header_token(in, magic) || magic != "P5") {
    throw DataError(DataErrorKind::BadHeader,
                    path.string() + ": malformed PGM header (expected magic P5)");
  }
  const int w = header_int(in, path, "width");
  const int h = header_int(in, path, "height");
  const int maxval = header_int(in, path, "maxval");
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
    throw DataError(DataErrorKind::BadHeader,
                    path.string() + ": unsupported PGM geometry or maxval (8-bit only)");
  }
  if (!std::isspace(in.get())) {
    throw DataError(DataErrorKind::BadHeader, path.string() + ": malformed PGM header");
  }
  Grid<std::uint8_t> img(h, w);
  in.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.size())) {
    throw DataError(DataErrorKind::SizeMismatch,
                    path.string() + ": pixel data shorter than " + std::to_string(w) + "x" +
                        std::to_string(h));
  }
  if (maxval != 255) {
    for (auto& v : img.px) {
      v = static_cast<std::uint8_t>(std::lround(255.0 * std::min<int>(v, maxval) / maxval));
    }
  }
  return img;
}

void write_pgm(const fs::path& path, const Grid<std::uint8_t>& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataErrorKind::Io, path.string() + ": cannot write file");
  out << "P5\n" << img.w << ' ' << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.size()));
  if (!out) throw DataError(DataErrorKind::Io, path.string() + ": write failed");
}

Grid<std::uint8_t> to_u8(const ImageF& img) {
  Grid<std::uint8_t> out(img.h, img.w);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(static_cast<double>(img.px[i]), 0.0, 1.0);
    out.px[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

ImageF to_unit(const Grid<std::uint8_t>& img, int maxval) {
  ImageF out(img.h, img.w);
  for (std::size_t i = 0; i < img.size(); ++i) out.px[i] = static_cast<float>(img.px[i]) / maxval;
  return out;
}

std::vector<std::string> read_split(const fs::path& root, const std::string& split) {
  const fs::path p = root / "splits" / (split + ".txt");
  std::ifstream in(p);
  if (!in) throw DataError(DataErrorKind::MissingFile, p.string() + ": cannot open split list");
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    std::size_t b = 0;
    while (b < line.size() && std::isspace(static_cast<unsigned char>(line[b]))) ++b;
    if (b < line.size()) ids.push_back(line.substr(b));
  }
  return ids;
}

std::vector<Sample> load_dataset(const fs::path& root, const std::vector<std::string>& ids) {
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const fs::path ip = root / "images" / (id + ".pgm");
    const fs::path mp = root / "masks" / (id + ".pgm");
    Sample s;
    s.id = id;
    s.image = to_unit(read_pgm(ip));
    const Grid<std::uint8_t> raw = read_pgm(mp);
    if (!raw.same_size(s.image.h, s.image.w)) {
      throw DataError(DataErrorKind::SizeMismatch,
                      mp.string() + ": mask is " + std::to_string(raw.w) + "x" +
                          std::to_string(raw.h) + " but image is " + std::to_string(s.image.w) +
                          "x" + std::to_string(s.image.h));
    }
    s.mask = Mask(raw.h, raw.w);
    for (std::size_t i = 0; i < raw.size(); ++i) s.mask.px[i] = raw.px[i] >= 128 ? 1 : 0;
    out.push_back(std::move(s));
  }
  return out;
}

Sample augment(const Sample& s, std::uint64_t seed, int crop) {
  if (crop < 1) throw std::invalid_argument("augment: crop size must be positive");
  Rng rng(seed);
  const bool hflip = rng.coin(0.5);
  const bool vflip = rng.coin(0.5);
  const ImageF img = pad_reflect(s.image, crop, crop);
  const Mask msk = pad_reflect(s.mask, crop, crop);
  const int oy = rng.range(0, img.h - crop);
  const int ox = rng.range(0, img.w - crop);
  return Sample{s.id, transform(img, hflip, vflip, oy, ox, crop),
                transform(msk, hflip, vflip, oy, ox, crop)};
}

std::pair<Tensor<float>, Tensor<float>> to_batch(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("to_batch: empty batch");
  const int h = samples[0]->image.h, w = samples[0]->image.w;
  const int n = static_cast<int>(samples.size());
  Tensor<float> x(Shape{n, 1, h, w}), y(Shape{n, 1, h, w});
  for (int i = 0; i < n; ++i) {
    const Sample& s = *samples[i];
    if (!s.image.same_size(h, w) || !s.mask.same_size(h, w)) {
      throw std::invalid_argument("to_batch: sample '" + s.id + "' differs in size");
    }
    std::copy(s.image.px.begin(), s.image.px.end(), x.data().begin() + static_cast<std::size_t>(i) * h * w);
    std::transform(s.mask.px.begin(), s.mask.px.end(),
                   y.data().begin() + static_cast<std::size_t>(i) * h * w,
                   [](std::uint8_t v) { return v ? 1.0f : 0.0f; });
  }
  return {std::move(x), std::move(y)};
}

void SynthConfig::validate() const {
  if (count < 1) throw std::invalid_argument("synth: count must be >= 1");
  if (image_size < 8) throw std::invalid_argument("synth: image_size must be >= 8");
  if (targets_min < 0 || targets_max < targets_min) {
    throw std::invalid_argument("synth: need 0 <= targets_min <= targets_max");
  }
  if (!(sigma_min > 0) || sigma_max < sigma_min) {
    throw std::invalid_argument("synth: need 0 < sigma_min <= sigma_max");
  }
  if (!(peak_min > 0) || peak_max < peak_min || peak_max > 1) {
    throw std::invalid_argument("synth: need 0 < peak_min <= peak_max <= 1");
  }
  if (!(clutter_smoothness > 0)) throw std::invalid_argument("synth: clutter_smoothness must be > 0");
  if (clutter_level < 0 || noise_sigma < 0) {
    throw std::invalid_argument("synth: clutter_level and noise_sigma must be >= 0");
  }
  if (!(train_fraction > 0 && train_fraction < 1)) {
    throw std::invalid_argument("synth: train_fraction must lie in (0, 1)");
  }
}

std::string synth_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return buf;
}

Sample synth_sample(const SynthConfig& cfg, int index, std::vector<SynthTarget>* targets) {
  cfg.validate();
  const int n = cfg.image_size;
  const std::string id = synth_id(index);
  Rng rng(derive_seed(cfg.seed, "synth/" + id));

  std::vector<double> clutter(static_cast<std::size_t>(n) * n);
  for (double& v : clutter) v = rng.normal();
  gaussian_blur(clutter, n, cfg.clutter_smoothness);
  const auto [lo, hi] = std::minmax_element(clutter.begin(), clutter.end());
  const double span = *hi - *lo;
  std::vector<double> img(clutter.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double c = span > 0 ? (clutter[i] - *lo) / span : 0.0;
    img[i] = 0.1 + cfg.clutter_level * c;
  }

  Mask mask(n, n);
  const int count = rng.range(cfg.targets_min, cfg.targets_max);
  const double margin = 2.0;
  std::vector<SynthTarget> tg;
  for (int t = 0; t < count; ++t) {
    SynthTarget s;
    s.cy = rng.uniform(margin, n - 1 - margin);
    s.cx = rng.uniform(margin, n - 1 - margin);
    s.sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
    s.peak = rng.uniform(cfg.peak_min, cfg.peak_max);
    tg.push_back(s);
    const double half_r2 = 2.0 * s.sigma * s.sigma * std::log(2.0);
    const int r = static_cast<int>(std::ceil(4 * s.sigma));
    const int y0 = std::max(0, static_cast<int>(s.cy) - r), y1 = std::min(n - 1, static_cast<int>(s.cy) + r + 1);
    const int x0 = std::max(0, static_cast<int>(s.cx) - r), x1 = std::min(n - 1, static_cast<int>(s.cx) + r + 1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double r2 = (y - s.cy) * (y - s.cy) + (x - s.cx) * (x - s.cx);
        img[static_cast<std::size_t>(y) * n + x] += s.peak * std::exp(-r2 / (2 * s.sigma * s.sigma));
        if (r2 < half_r2) mask.at(y, x) = 1;
      }
    }
  }
  if (cfg.noise_sigma > 0) {
    for (double& v : img) v += cfg.noise_sigma * rng.normal();
  }
  ImageF out(n, n);
  for (std::size_t i = 0; i < img.size(); ++i) {
    out.px[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
  }
  if (targets) *targets = std::move(tg);
  return Sample{id, std::move(out), std::move(mask)};
}

void synth_generate(const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  for (const char* sub : {"images", "masks", "splits"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) {
      throw DataError(DataErrorKind::Io,
                      (out_dir / sub).string() + ": cannot create directory (" + ec.message() + ")");
    }
  }
  std::vector<int> order(cfg.count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, "synth/split"));
  for (int i = cfg.count - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  }
  const int n_train = std::clamp(static_cast<int>(std::lround(cfg.train_fraction * cfg.count)), 1,
                                 std::max(1, cfg.count - 1));
  std::vector<int> train(order.begin(), order.begin() + n_train);
  std::vector<int> test(order.begin() + n_train, order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());

  for (int i = 0; i < cfg.count; ++i) {
    const Sample s = synth_sample(cfg, i);
    write_pgm(out_dir / "images" / (s.id + ".pgm"), to_u8(s.image));
    Grid<std::uint8_t> m(s.mask.h, s.mask.w);
    for (std::size_t k = 0; k < m.size(); ++k) m.px[k] = s.mask.px[k] ? 255 : 0;
    write_pgm(out_dir / "masks" / (s.id + ".pgm"), m);
  }
  auto write_list = [&](const std::string& name, const std::vector<int>& ids) {
    std::ofstream out(out_dir / "splits" / (name + ".txt"));
    if (!out) throw DataError(DataErrorKind::Io, (out_dir / "splits" / name).string() + ": cannot write");
    for (int i : ids) out << synth_id(i) << '\n';
  };
  write_list("train", train);
  write_list("test", test);
}

}  // namespace rrca
