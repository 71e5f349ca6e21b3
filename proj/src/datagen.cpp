#include "panet/datagen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "panet/random.hpp"

namespace panet {

std::string to_string(Light light) {
  switch (light) {
    case Light::dark:
      return "dark";
    case Light::normal:
      return "normal";
    case Light::exposure:
      return "exposure";
    case Light::nonuniform:
      return "nonuniform";
  }
  return "normal";
}

std::string to_string(Orientation orientation) {
  switch (orientation) {
    case Orientation::left:
      return "left";
    case Orientation::front:
      return "front";
    case Orientation::right:
      return "right";
  }
  return "front";
}

Light parse_light(std::string_view text) {
  for (auto l : kLights) {
    if (text == to_string(l)) return l;
  }
  throw DataError("unknown light condition '" + std::string(text) +
                  "' (expected dark, normal, exposure or nonuniform)");
}

Orientation parse_orientation(std::string_view text) {
  for (auto o : kOrientations) {
    if (text == to_string(o)) return o;
  }
  throw DataError("unknown orientation '" + std::string(text) + "' (expected left, front or right)");
}

nlohmann::json to_json(const ManifestRecord& record) {
  nlohmann::json j{{"path", record.path}, {"id", record.id}, {"split", record.split}};
  if (record.light) j["light"] = to_string(*record.light);
  if (record.orientation) j["orientation"] = to_string(*record.orientation);
  return j;
}

ManifestRecord record_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("manifest record is not a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "path" && key != "id" && key != "split" && key != "light" && key != "orientation") {
      throw DataError("manifest record has unknown field '" + key + "'");
    }
  }
  auto text = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) {
      throw DataError(std::string("manifest record is missing string field '") + key + "'");
    }
    return j[key].get<std::string>();
  };
  ManifestRecord r;
  r.path = text("path");
  r.id = text("id");
  r.split = text("split");
  if (r.split != "train" && r.split != "test") {
    throw DataError("manifest split must be train or test, got '" + r.split + "'");
  }
  if (j.contains("light")) r.light = parse_light(text("light"));
  if (j.contains("orientation")) r.orientation = parse_orientation(text("orientation"));
  return r;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest: " + path.string());
  std::vector<ManifestRecord> records;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": invalid JSON");
    }
    try {
      records.push_back(record_from_json(j));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen.insert(records.back().path).second) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": duplicate path '" +
                      records.back().path + "'");
    }
  }
  return records;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.path).second) throw DataError("duplicate manifest path '" + r.path + "'");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write manifest: " + path.string());
  for (const auto& r : records) os << to_json(r).dump() << '\n';
  if (!os) throw DataError("failed writing manifest: " + path.string());
}

std::vector<ManifestRecord> filter_split(const std::vector<ManifestRecord>& records,
                                         std::string_view split) {
  std::vector<ManifestRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

namespace {

class PpmParser {
 public:
  explicit PpmParser(std::string_view bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const unsigned char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(c)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (value > 1u << 20) fail(std::string(what) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) fail(std::string("expected ") + what, start);
    return value;
  }

  [[noreturn]] void fail(const std::string& msg, std::size_t offset) const {
    throw DataError("PPM: " + msg + " at byte " + std::to_string(offset));
  }

  std::size_t pos_ = 0;
  std::string_view bytes_;
};

}  // namespace

Image decode_ppm(std::string_view bytes) {
  PpmParser p(bytes);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') p.fail("missing P6 magic", 0);
  p.pos_ = 2;
  const std::size_t width = p.number("width");
  const std::size_t height = p.number("height");
  const std::size_t maxval_at = p.pos_;
  const std::size_t maxval = p.number("maxval");
  if (width == 0 || height == 0) p.fail("zero image dimension", maxval_at);
  if (maxval != 255) p.fail("maxval must be 255, got " + std::to_string(maxval), maxval_at);
  if (p.pos_ >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[p.pos_]))) {
    p.fail("expected single whitespace after header", p.pos_);
  }
  ++p.pos_;
  const std::size_t need = width * height * 3;
  if (bytes.size() - p.pos_ < need) {
    p.fail("truncated payload: need " + std::to_string(need) + " bytes, have " +
               std::to_string(bytes.size() - p.pos_),
           bytes.size());
  }
  Image img(3, height, width);
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data() + p.pos_);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(data[(y * width + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return img;
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return decode_ppm(ss.str());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string encode_ppm(const Image& image) {
  if (image.channels != 3) throw DataError("PPM output needs 3 channels");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + image.width * image.height * 3);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        out[header + (y * image.width + x) * 3 + c] =
            static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
      }
    }
  }
  return out;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  const std::string bytes = encode_ppm(image);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write image: " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing image: " + path.string());
}

Tensor<float> to_tensor(const Image& image) {
  return Tensor<float>({1, image.channels, image.height, image.width}, image.pixels);
}

Image from_tensor(const Tensor<float>& x) {
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw ShapeError("expected a (1,C,H,W) image tensor, got " + shape_str(x.shape()));
  }
  Image img(x.dim(1), x.dim(2), x.dim(3));
  std::copy(x.data().begin(), x.data().end(), img.pixels.begin());
  return img;
}

Tensor<float> load_image(const std::filesystem::path& path) { return to_tensor(read_ppm(path)); }

void save_image(const Tensor<float>& x, const std::filesystem::path& path) {
  write_ppm(from_tensor(x), path);
}

Image resize(const Image& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw std::invalid_argument("resize target must be at least 1x1");
  if (height == image.height && width == image.width) return image;
  Image out(image.channels, height, width);
  auto axis = [](std::size_t dst, std::size_t in, std::size_t out_n) {
    double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) /
                     static_cast<double>(out_n) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const std::size_t lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    return std::tuple<std::size_t, std::size_t, double>{lo, hi, src - static_cast<double>(lo)};
  };
  for (std::size_t y = 0; y < height; ++y) {
    const auto [y0, y1, fy] = axis(y, image.height, height);
    for (std::size_t x = 0; x < width; ++x) {
      const auto [x0, x1, fx] = axis(x, image.width, width);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = (1 - fx) * image.at(c, y0, x0) + fx * image.at(c, y0, x1);
        const double bottom = (1 - fx) * image.at(c, y1, x0) + fx * image.at(c, y1, x1);
        out.at(c, y, x) = static_cast<float>((1 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

Tensor<float> resize(const Tensor<float>& x, std::size_t height, std::size_t width) {
  return to_tensor(resize(from_tensor(x), height, width));
}

Image augment(const Image& image, const AugmentOp& op) {
  return std::visit(
      [&](const auto& o) -> Image {
        using Op = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<Op, HFlip>) {
          Image out = image;
          for (std::size_t c = 0; c < image.channels; ++c) {
            for (std::size_t y = 0; y < image.height; ++y) {
              for (std::size_t x = 0; x < image.width; ++x) {
                out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
              }
            }
          }
          return out;
        } else if constexpr (std::is_same_v<Op, Brightness>) {
          if (!(o.factor > 0.0)) throw std::invalid_argument("brightness factor must be positive");
          Image out = image;
          if (o.factor == 1.0) return out;
          for (auto& v : out.pixels) {
            v = std::clamp(static_cast<float>(v * o.factor), 0.0f, 1.0f);
          }
          return out;
        } else {
          const auto w = static_cast<long>(image.width), h = static_cast<long>(image.height);
          if (std::abs(o.dx) >= w || std::abs(o.dy) >= h) {
            throw std::invalid_argument("translation (" + std::to_string(o.dx) + "," +
                                        std::to_string(o.dy) + ") exceeds image size");
          }
          Image out(image.channels, image.height, image.width, 0.0f);
          for (std::size_t c = 0; c < image.channels; ++c) {
            for (long y = 0; y < h; ++y) {
              const long sy = y - o.dy;
              if (sy < 0 || sy >= h) continue;
              for (long x = 0; x < w; ++x) {
                const long sx = x - o.dx;
                if (sx < 0 || sx >= w) continue;
                out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                    image.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
              }
            }
          }
          return out;
        }
      },
      op);
}

void SynthConfig::validate() const {
  if (n_identities < 2) {
    throw std::invalid_argument("synthetic corpus needs at least 2 identities, got " +
                                std::to_string(n_identities));
  }
  if (samples_per_identity < 2) {
    throw std::invalid_argument("synthetic corpus needs at least 2 samples per identity, got " +
                                std::to_string(samples_per_identity));
  }
  if (image_size < 8) throw std::invalid_argument("image_size must be at least 8");
  auto check_mix = [](std::span<const double> mix, const char* what) {
    double total = 0;
    for (double v : mix) {
      if (v < 0) throw std::invalid_argument(std::string(what) + " mix has a negative weight");
      total += v;
    }
    if (!(total > 0)) throw std::invalid_argument(std::string(what) + " mix sums to zero");
  };
  check_mix(condition_mix.light, "light");
  check_mix(condition_mix.orientation, "orientation");
}

namespace {

struct Blob {
  double cx, cy, radius;
  std::array<double, 3> delta;
};

struct IdentityPattern {
  std::array<double, 3> base;
  double freq, angle, phase;
  std::array<double, 3> amplitude;
  std::array<Blob, 3> blobs;
};

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

IdentityPattern make_pattern(std::uint64_t seed, std::size_t identity) {
  Rng rng = make_rng(seed, 1000 + identity);
  IdentityPattern p{};
  for (auto& c : p.base) c = uniform(rng, 0.2, 0.8);
  p.freq = uniform(rng, 1.5, 4.0);
  p.angle = uniform(rng, 0.0, std::numbers::pi);
  p.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  for (auto& a : p.amplitude) a = uniform(rng, 0.08, 0.22) * (uniform01(rng) < 0.5 ? -1.0 : 1.0);
  for (auto& b : p.blobs) {
    b.cx = uniform(rng, 0.2, 0.8);
    b.cy = uniform(rng, 0.2, 0.8);
    b.radius = uniform(rng, 0.08, 0.2);
    for (auto& d : b.delta) d = uniform(rng, -0.35, 0.35);
  }
  return p;
}

double pattern_value(const IdentityPattern& p, std::size_t c, double u, double v) {
  double value = p.base[c];
  value += p.amplitude[c] *
           std::sin(2.0 * std::numbers::pi * p.freq * (u * std::cos(p.angle) + v * std::sin(p.angle)) +
                    p.phase);
  for (const auto& b : p.blobs) {
    const double du = u - b.cx, dv = v - b.cy;
    value += b.delta[c] * std::exp(-(du * du + dv * dv) / (2.0 * b.radius * b.radius));
  }
  return value;
}

template <std::size_t N>
std::size_t weighted_pick(Rng& rng, const std::array<double, N>& weights) {
  double total = 0;
  for (double w : weights) total += w;
  double r = uniform01(rng) * total;
  for (std::size_t i = 0; i < N; ++i) {
    if (r < weights[i]) return i;
    r -= weights[i];
  }
  return N - 1;
}

}  // namespace

Image render_sample(const SynthConfig& cfg, std::size_t identity, std::size_t sample, Light light,
                    Orientation orientation) {
  const IdentityPattern pattern = make_pattern(cfg.seed, identity);
  Rng rng = make_rng(cfg.seed, (identity << 20) + sample + 1);
  const std::size_t s = cfg.image_size;
  const double size = static_cast<double>(s);
  const double shear = orientation == Orientation::left    ? 0.3
                       : orientation == Orientation::right ? -0.3
                                                           : 0.0;
  const bool mirror = orientation == Orientation::right;

  Image img(3, s, s);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      double px = mirror ? size - 1.0 - static_cast<double>(x) : static_cast<double>(x);
      const double py = static_cast<double>(y);
      px += shear * (py - size / 2.0);
      const double u = (px + 0.5) / size, v = (py + 0.5) / size;
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(pattern_value(pattern, c, u, v));
      }
    }
  }
  for (auto& v : img.pixels) {
    v = std::clamp(static_cast<float>(v + 0.02 * standard_normal(rng)), 0.0f, 1.0f);
  }

  switch (light) {
    case Light::dark:
      img = augment(img, Brightness{0.4});
      break;
    case Light::exposure:
      img = augment(img, Brightness{1.8});
      break;
    case Light::nonuniform:
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < s; ++y) {
          for (std::size_t x = 0; x < s; ++x) {
            const double gain = 0.4 + 1.2 * static_cast<double>(x) / (size - 1.0);
            img.at(c, y, x) = std::clamp(static_cast<float>(img.at(c, y, x) * gain), 0.0f, 1.0f);
          }
        }
      }
      break;
    case Light::normal:
      break;
  }

  // Offline augmentation: small jitter in brightness and position.
  img = augment(img, Brightness{uniform(rng, 0.9, 1.1)});
  const int dx = static_cast<int>(uniform_index(rng, 5)) - 2;
  const int dy = static_cast<int>(uniform_index(rng, 5)) - 2;
  return augment(img, Translate{dx, dy});
}

std::vector<ManifestRecord> generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw DataError("cannot create output directory " + out_dir.string() + ": " + ec.message());

  Rng conditions = make_rng(cfg.seed, 7);
  std::vector<ManifestRecord> records;
  const int id_width = cfg.n_identities >= 1000 ? 4 : 3;
  for (std::size_t i = 0; i < cfg.n_identities; ++i) {
    std::string id = std::to_string(i);
    id = "id_" + std::string(static_cast<std::size_t>(std::max(0, id_width - static_cast<int>(id.size()))), '0') + id;
    std::filesystem::create_directories(out_dir / "images" / id, ec);
    if (ec) throw DataError("cannot create " + (out_dir / "images" / id).string() + ": " + ec.message());
    for (std::size_t k = 0; k < cfg.samples_per_identity; ++k) {
      const Light light = kLights[weighted_pick(conditions, cfg.condition_mix.light)];
      const Orientation orientation =
          kOrientations[weighted_pick(conditions, cfg.condition_mix.orientation)];
      std::string name = std::to_string(k);
      if (name.size() < 3) name = std::string(3 - name.size(), '0') + name;
      const std::string rel = "images/" + id + "/s_" + name + ".ppm";
      write_ppm(render_sample(cfg, i, k, light, orientation), out_dir / rel);
      records.push_back({rel, id, "train", light, orientation});
    }
  }
  return records;
}

SplitResult split(const std::vector<ManifestRecord>& records, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("split ratio must be in (0, 1), got " + std::to_string(ratio));
  }
  std::map<std::string, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < records.size(); ++i) by_id[records[i].id].push_back(i);

  std::vector<bool> to_train(records.size(), false);
  Rng rng = make_rng(seed, 11);
  for (auto& [id, idx] : by_id) {
    if (idx.size() < 2) {
      throw DataError("identity '" + id + "' has " + std::to_string(idx.size()) +
                      " sample(s); at least 2 are needed to appear in both splits");
    }
    auto n_train = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    std::vector<std::size_t> order = idx;
    shuffle_in_place(order, rng);
    for (std::size_t k = 0; k < n_train; ++k) to_train[order[k]] = true;
  }
  SplitResult out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    ManifestRecord r = records[i];
    r.split = to_train[i] ? "train" : "test";
    (to_train[i] ? out.train : out.test).push_back(std::move(r));
  }
  return out;
}

}  // namespace panet
