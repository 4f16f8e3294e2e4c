#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "covidfact/volume.hpp"
#include "json.hpp"

namespace covidfact {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Binary portable graymap (P5). Samples above 255 use two bytes, big-endian.

struct PgmImage {
  std::size_t width = 0, height = 0;
  std::uint16_t maxval = 255;
  std::vector<std::uint16_t> pixels;  // row-major
};

inline PgmImage read_pgm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image: " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P5") throw DataError("not a binary PGM (P5): " + path.string());
  PgmImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    const unsigned long mv = std::stoul(token());
    if (mv == 0 || mv > 65535) throw DataError("bad PGM maxval in " + path.string());
    img.maxval = static_cast<std::uint16_t>(mv);
  } catch (const std::logic_error&) {
    throw DataError("malformed PGM header: " + path.string());
  }
  if (img.width == 0 || img.height == 0) throw DataError("empty PGM: " + path.string());
  const std::size_t n = img.width * img.height;
  const std::size_t bps = img.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bps);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw DataError("truncated PGM data: " + path.string());
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    img.pixels[i] = bps == 2 ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
  return img;
}

inline void write_pgm(const fs::path& path, const PgmImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write image: " + path.string());
  os << "P5\n" << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
  const bool wide = img.maxval > 255;
  std::vector<unsigned char> raw;
  raw.reserve(img.pixels.size() * (wide ? 2 : 1));
  for (auto v : img.pixels) {
    if (wide) raw.push_back(static_cast<unsigned char>(v >> 8));
    raw.push_back(static_cast<unsigned char>(v & 0xff));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw DataError("failed writing image: " + path.string());
}

// [0,1] tensor to an 8-bit image, rounding to nearest.
inline PgmImage to_pgm8(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("to_pgm8: expected [H,W], got " + shape_str(t.shape()));
  PgmImage img{t.dim(1), t.dim(0), 255, {}};
  img.pixels.reserve(t.size());
  for (double v : t.data()) img.pixels.push_back(static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return img;
}

// 16-bit samples hold HU + 32768.
inline constexpr int kHuOffset = 32768;

// ---------------------------------------------------------------------------

struct HuWindow {
  double center = -600.0;
  double width = 1200.0;
};

// Clamp to [center - width/2, center + width/2] and map affinely onto [0,1].
inline double hu_window(double hu, const HuWindow& w = {}) {
  if (!(w.width > 0.0)) throw ConfigError("HU window width must be positive");
  const double lo = w.center - w.width / 2.0;
  return std::clamp((hu - lo) / w.width, 0.0, 1.0);
}

inline Tensor hu_window(const Tensor& raw, const HuWindow& w = {}) {
  Tensor out(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = hu_window(raw[i], w);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

enum class PixelEncoding { pgm8, pgm16_hu };

inline PixelEncoding parse_encoding(const std::string& s) {
  if (s == "pgm8") return PixelEncoding::pgm8;
  if (s == "pgm16_hu") return PixelEncoding::pgm16_hu;
  throw DataError("unknown pixel encoding '" + s + "'");
}
inline std::string to_string(PixelEncoding e) { return e == PixelEncoding::pgm8 ? "pgm8" : "pgm16_hu"; }

struct ManifestEntry {
  std::string patient_id;
  Label label = Label::unknown;
  PixelEncoding encoding = PixelEncoding::pgm16_hu;
  std::vector<std::string> slices;
  std::vector<std::string> masks;     // empty or same length as slices
  std::vector<bool> infection;        // empty or same length as slices
};

struct Manifest {
  int format_version = 1;
  std::vector<ManifestEntry> patients;
};

inline constexpr int kManifestVersion = 1;

class ManifestError : public DataError {
 public:
  enum class Kind { parse, missing_file, length_mismatch, unknown_encoding, unknown_label, bad_image };
  ManifestError(Kind k, const std::string& msg) : DataError(msg), kind_(k) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : m.patients) {
    nlohmann::json e{{"patient_id", p.patient_id},
                     {"label", to_string(p.label)},
                     {"encoding", to_string(p.encoding)},
                     {"slices", p.slices}};
    if (!p.masks.empty()) e["masks"] = p.masks;
    if (!p.infection.empty()) e["infection"] = p.infection;
    pts.push_back(std::move(e));
  }
  return {{"format_version", m.format_version}, {"patients", pts}};
}

inline Manifest parse_manifest(const nlohmann::json& j) {
  using K = ManifestError::Kind;
  Manifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kManifestVersion)
      throw ManifestError(K::parse, "unsupported manifest format_version " + std::to_string(m.format_version));
    for (const auto& e : j.at("patients")) {
      ManifestEntry p;
      p.patient_id = e.at("patient_id").get<std::string>();
      try {
        p.label = parse_label(e.value("label", std::string("Unknown")));
      } catch (const DataError& err) {
        throw ManifestError(K::unknown_label, "patient " + p.patient_id + ": " + err.what());
      }
      try {
        p.encoding = parse_encoding(e.value("encoding", std::string("pgm16_hu")));
      } catch (const DataError& err) {
        throw ManifestError(K::unknown_encoding, "patient " + p.patient_id + ": " + err.what());
      }
      p.slices = e.at("slices").get<std::vector<std::string>>();
      if (e.contains("masks")) p.masks = e["masks"].get<std::vector<std::string>>();
      if (e.contains("infection")) p.infection = e["infection"].get<std::vector<bool>>();
      if (p.slices.empty()) throw ManifestError(K::length_mismatch, "patient " + p.patient_id + ": no slices");
      if (!p.masks.empty() && p.masks.size() != p.slices.size())
        throw ManifestError(K::length_mismatch, "patient " + p.patient_id + ": " + std::to_string(p.masks.size()) +
                                                    " masks for " + std::to_string(p.slices.size()) + " slices");
      if (!p.infection.empty() && p.infection.size() != p.slices.size())
        throw ManifestError(K::length_mismatch, "patient " + p.patient_id + ": " + std::to_string(p.infection.size()) +
                                                    " infection labels for " + std::to_string(p.slices.size()) + " slices");
      m.patients.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(K::parse, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

inline Manifest read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ManifestError(ManifestError::Kind::missing_file, "cannot open manifest: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(ManifestError::Kind::parse, "manifest " + path.string() + ": " + e.what());
  }
  return parse_manifest(j);
}

// Decoded pixels of one slice file, in [0,1].
inline Tensor decode_slice(const PgmImage& img, PixelEncoding enc, const HuWindow& window) {
  Tensor t({img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (enc == PixelEncoding::pgm8)
      t[i] = static_cast<double>(img.pixels[i]) / static_cast<double>(img.maxval);
    else
      t[i] = hu_window(static_cast<double>(img.pixels[i]) - kHuOffset, window);
  }
  return t;
}

inline Tensor decode_mask(const PgmImage& img) {
  Tensor t({img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i] ? 1.0 : 0.0;
  return t;
}

// Loads every patient of a manifest. Relative paths resolve against the
// manifest's directory. 16-bit HU slices are windowed on load.
inline std::vector<Volume> load_dataset(const fs::path& manifest_path, const HuWindow& window = {}) {
  using K = ManifestError::Kind;
  const Manifest m = read_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  auto open = [&](const std::string& pid, const std::string& rel) {
    const fs::path p = base / rel;
    if (!fs::exists(p)) throw ManifestError(K::missing_file, "patient " + pid + ": missing file " + p.string());
    try {
      return read_pgm(p);
    } catch (const DataError& e) {
      throw ManifestError(K::bad_image, "patient " + pid + ": " + e.what());
    }
  };
  std::vector<Volume> out;
  for (const auto& e : m.patients) {
    Volume v{e.patient_id, {}, e.label, e.slices.size()};
    for (std::size_t i = 0; i < e.slices.size(); ++i) {
      SliceRecord s;
      s.pixels = decode_slice(open(e.patient_id, e.slices[i]), e.encoding, window);
      if (!e.masks.empty()) {
        s.lung_mask = decode_mask(open(e.patient_id, e.masks[i]));
        if (s.lung_mask->shape() != s.pixels.shape())
          throw ManifestError(K::length_mismatch, "patient " + e.patient_id + ": mask " + std::to_string(i) +
                                                      " shape differs from its slice");
      }
      if (!e.infection.empty()) s.infection_label = e.infection[i];
      s.source_index = i;
      if (!v.slices.empty() && v.slices.front().pixels.shape() != s.pixels.shape())
        throw ManifestError(K::length_mismatch, "patient " + e.patient_id + ": inconsistent slice dimensions");
      v.slices.push_back(std::move(s));
    }
    out.push_back(std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patient-level split

struct SplitSpec {
  double train = 0.6;
  double val = 0.1;
  double test = 0.3;
  std::uint64_t seed = 0;
  bool stratify = true;
};

struct Split {
  std::vector<std::size_t> train, val, test;  // indices into the volume list, ascending
};

// Sizes: val = floor(N * val), test = floor(N * test), the remainder goes to
// train. Patients are shuffled per label and interleaved by their relative
// rank inside the label, so any prefix of the order carries the label mix
// of the whole set; test takes the first block, val the next.
inline Split split(const std::vector<Volume>& volumes, const SplitSpec& spec) {
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw ConfigError("split fractions must be non-negative and sum to 1");
  const std::size_t n = volumes.size();
  if (spec.stratify && n == 0) throw DataError("split: no patients to stratify");
  Rng rng(spec.seed);
  std::map<Label, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[spec.stratify ? volumes[i].label : Label::unknown].push_back(i);
  struct Key {
    double pos;
    Label label;
    std::size_t index;
  };
  std::vector<Key> order;
  for (auto& [label, idx] : groups) {
    rng.shuffle(idx);
    for (std::size_t r = 0; r < idx.size(); ++r)
      order.push_back({(static_cast<double>(r) + 0.5) / static_cast<double>(idx.size()), label, idx[r]});
  }
  std::stable_sort(order.begin(), order.end(), [](const Key& a, const Key& b) {
    return a.pos != b.pos ? a.pos < b.pos : a.label < b.label;
  });
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.test + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.val + 1e-9));
  Split s;
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& bucket = k < n_test ? s.test : (k < n_test + n_val ? s.val : s.train);
    bucket.push_back(order[k].index);
  }
  for (auto* b : {&s.train, &s.val, &s.test}) std::sort(b->begin(), b->end());
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic CT-like volumes

// Lesion-free "normal" patients, "COVID-like" patients with several small
// peripheral ground-glass blobs, and "CAP-like" patients with one or two
// larger central blobs. Slices are axial cuts through a body ellipse with two
// lung ellipses whose size varies along the scan; the first and last slice
// contain no lung.
struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t patients_per_class = 25;
  std::size_t slices_per_volume = 16;
  std::size_t image_size = 64;
  double infected_fraction_min = 0.35;  // share of lung slices carrying lesions
  double infected_fraction_max = 0.7;
  double peripheral_sigma_min = 0.035;  // lesion blob sigma, fraction of image size
  double peripheral_sigma_max = 0.05;
  double central_sigma_min = 0.05;
  double central_sigma_max = 0.07;
  std::size_t peripheral_lesions_min = 2, peripheral_lesions_max = 4;
  std::size_t central_lesions_min = 1, central_lesions_max = 2;
  double lesion_hu = -300.0;
  double lung_hu = -850.0;

  void validate() const {
    if (patients_per_class == 0) throw ConfigError("synth: patients_per_class must be positive");
    if (slices_per_volume < 3) throw ConfigError("synth: need at least 3 slices per volume");
    if (image_size < 32) throw ConfigError("synth: image_size must be at least 32");
    if (!(0.0 < infected_fraction_min && infected_fraction_min <= infected_fraction_max && infected_fraction_max <= 1.0))
      throw ConfigError("synth: infected fraction range must satisfy 0 < min <= max <= 1");
    for (auto [lo, hi] : {std::pair{peripheral_sigma_min, peripheral_sigma_max}, std::pair{central_sigma_min, central_sigma_max}}) {
      if (!(lo > 0 && lo <= hi)) throw ConfigError("synth: lesion sigma range must satisfy 0 < min <= max");
      if (lo * static_cast<double>(image_size) < 1.0)
        throw ConfigError("synth: image_size " + std::to_string(image_size) + " too small for lesion sigma " + std::to_string(lo));
      if (hi > 0.12) throw ConfigError("synth: lesion sigma too large for the lung fields");
    }
    if (peripheral_lesions_min == 0 || peripheral_lesions_min > peripheral_lesions_max || central_lesions_min == 0 ||
        central_lesions_min > central_lesions_max)
      throw ConfigError("synth: lesion count ranges must satisfy 1 <= min <= max");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"patients_per_class", c.patients_per_class},
                     {"slices_per_volume", c.slices_per_volume},
                     {"image_size", c.image_size},
                     {"infected_fraction", {c.infected_fraction_min, c.infected_fraction_max}},
                     {"peripheral_sigma", {c.peripheral_sigma_min, c.peripheral_sigma_max}},
                     {"central_sigma", {c.central_sigma_min, c.central_sigma_max}},
                     {"peripheral_lesions", {c.peripheral_lesions_min, c.peripheral_lesions_max}},
                     {"central_lesions", {c.central_lesions_min, c.central_lesions_max}},
                     {"lesion_hu", c.lesion_hu},
                     {"lung_hu", c.lung_hu}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  auto pair = [&](const char* key, auto& lo, auto& hi) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("synth: ") + key + " must be [min, max]");
    v[0].get_to(lo);
    v[1].get_to(hi);
  };
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("patients_per_class")) c.patients_per_class = j["patients_per_class"].get<std::size_t>();
  if (j.contains("slices_per_volume")) c.slices_per_volume = j["slices_per_volume"].get<std::size_t>();
  if (j.contains("image_size")) c.image_size = j["image_size"].get<std::size_t>();
  pair("infected_fraction", c.infected_fraction_min, c.infected_fraction_max);
  pair("peripheral_sigma", c.peripheral_sigma_min, c.peripheral_sigma_max);
  pair("central_sigma", c.central_sigma_min, c.central_sigma_max);
  pair("peripheral_lesions", c.peripheral_lesions_min, c.peripheral_lesions_max);
  pair("central_lesions", c.central_lesions_min, c.central_lesions_max);
  if (j.contains("lesion_hu")) c.lesion_hu = j["lesion_hu"].get<double>();
  if (j.contains("lung_hu")) c.lung_hu = j["lung_hu"].get<double>();
}

struct SyntheticSlice {
  std::vector<std::int16_t> hu;       // image_size^2
  std::vector<std::uint8_t> lung;     // 0/1
  std::vector<std::uint8_t> lesion;   // 0/1, ground truth
  bool infected = false;
  struct Blob {
    double cx, cy, sigma;
  };
  std::vector<Blob> blobs;
};

struct SyntheticPatient {
  std::string patient_id;
  Label label;
  std::vector<SyntheticSlice> slices;
};

namespace detail {

struct Ellipse {
  double cx, cy, rx, ry;
  double radial(double x, double y) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return std::sqrt(dx * dx + dy * dy);
  }
};

inline SyntheticPatient synth_patient(const SynthConfig& cfg, Label label, std::size_t ordinal, Rng& rng) {
  const std::size_t S = cfg.image_size, Z = cfg.slices_per_volume;
  const double size = static_cast<double>(S);
  SyntheticPatient p;
  char id[32];
  std::snprintf(id, sizeof(id), "P%04zu", ordinal);
  p.patient_id = id;
  p.label = label;

  const double body_rx = size * rng.uniform(0.42, 0.46), body_ry = size * rng.uniform(0.32, 0.36);
  const double lung_gap = size * rng.uniform(0.18, 0.20);
  const double lung_rx = size * rng.uniform(0.13, 0.15), lung_ry = size * rng.uniform(0.23, 0.26);

  // Lesion-bearing slices: a contiguous block of the lung slices.
  const std::size_t lung_slices = Z - 2;
  std::size_t first_inf = 0, n_inf = 0;
  if (label == Label::covid || label == Label::cap) {
    const double f = rng.uniform(cfg.infected_fraction_min, cfg.infected_fraction_max);
    n_inf = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(f * static_cast<double>(lung_slices))), 1, lung_slices);
    // at least 7% of the whole scan
    n_inf = std::max<std::size_t>(n_inf, std::min<std::size_t>(lung_slices, static_cast<std::size_t>(std::ceil(0.07 * static_cast<double>(Z)))));
    first_inf = 1 + rng.below(lung_slices - n_inf + 1);
  }

  for (std::size_t z = 0; z < Z; ++z) {
    SyntheticSlice sl;
    sl.hu.assign(S * S, -1000);
    sl.lung.assign(S * S, 0);
    sl.lesion.assign(S * S, 0);
    const bool has_lung = z > 0 && z + 1 < Z;
    const double t = (static_cast<double>(z) + 0.5) / static_cast<double>(Z);
    const double scale = has_lung ? std::max(0.55, std::pow(std::sin(M_PI * t), 0.5)) : 0.0;
    const Ellipse body{size / 2, size / 2, body_rx, body_ry};
    std::array<Ellipse, 2> lungs{Ellipse{size / 2 - lung_gap, size / 2, lung_rx * scale, lung_ry * scale},
                                 Ellipse{size / 2 + lung_gap, size / 2, lung_rx * scale, lung_ry * scale}};
    std::vector<double> lesion_w(S * S, 0.0);
    if (has_lung && z >= first_inf && z < first_inf + n_inf) {
      const bool peripheral = label == Label::covid;
      const std::size_t lo = peripheral ? cfg.peripheral_lesions_min : cfg.central_lesions_min;
      const std::size_t hi = peripheral ? cfg.peripheral_lesions_max : cfg.central_lesions_max;
      const std::size_t count = lo + rng.below(hi - lo + 1);
      for (std::size_t b = 0; b < count; ++b) {
        const std::size_t side = peripheral ? b % 2 : rng.below(2);
        const Ellipse& L = lungs[side];
        double cx, cy, sigma;
        if (peripheral) {
          // along the outer (lateral) rim of the lung
          const double outward = side == 0 ? M_PI : 0.0;
          const double ang = outward + rng.uniform(-1.1, 1.1);
          const double r = rng.uniform(0.62, 0.78);
          cx = L.cx + r * L.rx * std::cos(ang);
          cy = L.cy + r * L.ry * std::sin(ang);
          sigma = size * rng.uniform(cfg.peripheral_sigma_min, cfg.peripheral_sigma_max);
        } else {
          const double ang = rng.uniform(0.0, 2.0 * M_PI);
          const double r = rng.uniform(0.0, 0.2);
          cx = L.cx + r * L.rx * std::cos(ang);
          cy = L.cy + r * L.ry * std::sin(ang);
          sigma = size * rng.uniform(cfg.central_sigma_min, cfg.central_sigma_max);
        }
        sl.blobs.push_back({cx, cy, sigma});
        for (std::size_t y = 0; y < S; ++y)
          for (std::size_t x = 0; x < S; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
            const double w = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            lesion_w[y * S + x] = std::max(lesion_w[y * S + x], w);
          }
      }
    }
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        const std::size_t i = y * S + x;
        double hu = -1000.0 + rng.normal(0.0, 5.0);
        if (body.radial(px, py) <= 1.0) hu = 40.0 + rng.normal(0.0, 10.0);
        if (has_lung && (lungs[0].radial(px, py) <= 1.0 || lungs[1].radial(px, py) <= 1.0)) {
          sl.lung[i] = 1;
          hu = cfg.lung_hu + rng.normal(0.0, 20.0);
          hu += (cfg.lesion_hu - cfg.lung_hu) * lesion_w[i];
          if (lesion_w[i] >= 0.5) sl.lesion[i] = 1;
        }
        sl.hu[i] = static_cast<std::int16_t>(std::lround(std::clamp(hu, -1024.0, 3071.0)));
      }
    if (has_lung) {
      // vessels: small bright dots, present in every lung slice
      for (const auto& L : lungs)
        for (int k = 0; k < 4; ++k) {
          const double ang = rng.uniform(0.0, 2.0 * M_PI), r = rng.uniform(0.0, 0.6);
          const auto vx = static_cast<std::size_t>(L.cx + r * L.rx * std::cos(ang));
          const auto vy = static_cast<std::size_t>(L.cy + r * L.ry * std::sin(ang));
          if (vx < S && vy < S && sl.lung[vy * S + vx]) sl.hu[vy * S + vx] = static_cast<std::int16_t>(-80 + rng.below(40));
        }
    }
    sl.infected = std::any_of(sl.lesion.begin(), sl.lesion.end(), [](auto v) { return v != 0; });
    p.slices.push_back(std::move(sl));
  }
  return p;
}

}  // namespace detail

// Generates patients in memory: patients_per_class each of COVID, CAP,
// Normal, in that order, with consecutive ids.
inline std::vector<SyntheticPatient> synthesize(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<SyntheticPatient> out;
  std::size_t ordinal = 1;
  for (Label label : {Label::covid, Label::cap, Label::normal})
    for (std::size_t k = 0; k < cfg.patients_per_class; ++k) out.push_back(detail::synth_patient(cfg, label, ordinal++, rng));
  return out;
}

// Windowed [0,1] volume exactly as load_dataset() would return it.
inline Volume to_volume(const SyntheticPatient& p, std::size_t image_size, const HuWindow& window = {}) {
  Volume v{p.patient_id, {}, p.label, p.slices.size()};
  for (std::size_t z = 0; z < p.slices.size(); ++z) {
    const auto& s = p.slices[z];
    SliceRecord r;
    r.pixels = Tensor({image_size, image_size});
    r.lung_mask = Tensor({image_size, image_size});
    for (std::size_t i = 0; i < s.hu.size(); ++i) {
      // same arithmetic path as decode_slice on the stored 16-bit sample
      const auto stored = static_cast<std::uint16_t>(s.hu[i] + kHuOffset);
      r.pixels[i] = hu_window(static_cast<double>(stored) - kHuOffset, window);
      (*r.lung_mask)[i] = s.lung[i] ? 1.0 : 0.0;
    }
    r.infection_label = s.infected;
    r.source_index = z;
    v.slices.push_back(std::move(r));
  }
  return v;
}

struct SynthSummary {
  std::size_t patients = 0, slices = 0, infected_slices = 0;
  std::map<std::string, std::size_t> per_label;
};

// Writes manifest.json, ground_truth.json and one directory of PGM files per
// patient (slice_###.pgm 16-bit HU, mask_###.pgm lung mask, lesion_###.pgm
// lesion ground truth).
inline SynthSummary generate_synthetic(const SynthConfig& cfg, const fs::path& out_dir) {
  const auto patients = synthesize(cfg);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw DataError("cannot create output directory " + out_dir.string());
  const std::size_t S = cfg.image_size;
  Manifest manifest;
  nlohmann::json truth_patients = nlohmann::json::array();
  SynthSummary summary;
  for (const auto& p : patients) {
    fs::create_directories(out_dir / p.patient_id, ec);
    if (ec) throw DataError("cannot create " + (out_dir / p.patient_id).string());
    ManifestEntry e{p.patient_id, p.label, PixelEncoding::pgm16_hu, {}, {}, {}};
    nlohmann::json tslices = nlohmann::json::array();
    for (std::size_t z = 0; z < p.slices.size(); ++z) {
      const auto& s = p.slices[z];
      char name[32];
      std::snprintf(name, sizeof(name), "%03zu.pgm", z);
      const std::string slice_rel = p.patient_id + "/slice_" + name;
      const std::string mask_rel = p.patient_id + "/mask_" + name;
      const std::string lesion_rel = p.patient_id + "/lesion_" + name;
      PgmImage img{S, S, 65535, {}}, mask{S, S, 255, {}}, lesion{S, S, 255, {}};
      for (std::size_t i = 0; i < s.hu.size(); ++i) {
        img.pixels.push_back(static_cast<std::uint16_t>(s.hu[i] + kHuOffset));
        mask.pixels.push_back(s.lung[i] ? 255 : 0);
        lesion.pixels.push_back(s.lesion[i] ? 255 : 0);
      }
      write_pgm(out_dir / slice_rel, img);
      write_pgm(out_dir / mask_rel, mask);
      write_pgm(out_dir / lesion_rel, lesion);
      e.slices.push_back(slice_rel);
      e.masks.push_back(mask_rel);
      e.infection.push_back(s.infected);
      nlohmann::json blobs = nlohmann::json::array();
      for (const auto& b : s.blobs) blobs.push_back({{"cx", b.cx}, {"cy", b.cy}, {"sigma", b.sigma}});
      tslices.push_back({{"index", z}, {"infected", s.infected}, {"lesion_mask", lesion_rel}, {"lesions", blobs}});
      summary.infected_slices += s.infected ? 1 : 0;
      ++summary.slices;
    }
    truth_patients.push_back({{"patient_id", p.patient_id},
                              {"label", to_string(p.label)},
                              {"style", p.label == Label::covid ? "peripheral" : p.label == Label::cap ? "central" : "lesion-free"},
                              {"slices", tslices}});
    manifest.patients.push_back(std::move(e));
    ++summary.patients;
    ++summary.per_label[to_string(p.label)];
  }
  const nlohmann::json truth{{"format_version", 1}, {"generator", cfg}, {"image_size", S}, {"patients", truth_patients}};
  auto write_json = [&](const fs::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(2) << '\n';
  };
  write_json(out_dir / "manifest.json", to_json(manifest));
  write_json(out_dir / "ground_truth.json", truth);
  return summary;
}

// Lesion masks from a ground-truth sidecar, keyed by patient id then slice
// index; slices without lesions map to all-zero masks.
inline std::map<std::string, std::vector<Tensor>> load_lesion_masks(const fs::path& sidecar) {
  std::ifstream is(sidecar);
  if (!is) throw DataError("cannot open ground truth: " + sidecar.string());
  std::map<std::string, std::vector<Tensor>> out;
  try {
    const auto j = nlohmann::json::parse(is);
    for (const auto& p : j.at("patients")) {
      auto& masks = out[p.at("patient_id").get<std::string>()];
      for (const auto& s : p.at("slices"))
        masks.push_back(decode_mask(read_pgm(sidecar.parent_path() / s.at("lesion_mask").get<std::string>())));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed ground truth " + sidecar.string() + ": " + e.what());
  }
  return out;
}

}  // namespace covidfact
