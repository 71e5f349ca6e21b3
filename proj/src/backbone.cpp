#include "panet/backbone.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace panet {

BackboneConfig BackboneConfig::desk() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::paper_scale() {
  BackboneConfig c;
  c.input_height = 224;
  c.input_width = 224;
  c.base_channels = 64;
  c.stage_depths = {2, 2, 6, 2};
  return c;
}

std::size_t BackboneConfig::stage_channels(std::size_t stage) const {
  return base_channels * channel_multipliers.at(stage);
}

std::pair<std::size_t, std::size_t> BackboneConfig::stage_resolution(std::size_t stage) const {
  const std::size_t factor = std::size_t{4} << stage;
  return {input_height / factor, input_width / factor};
}

std::size_t BackboneConfig::required_divisor() const {
  return num_stages() == 0 ? 4 : std::size_t{4} << (num_stages() - 1);
}

void BackboneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("backbone config: " + msg); };
  if (stage_depths.empty()) fail("at least one stage is required");
  if (channel_multipliers.size() != stage_depths.size()) {
    fail("channel_multipliers has " + std::to_string(channel_multipliers.size()) +
         " entries but there are " + std::to_string(stage_depths.size()) + " stages");
  }
  if (in_channels == 0 || base_channels == 0 || embedding_dim == 0) {
    fail("in_channels, base_channels and embedding_dim must be positive");
  }
  for (std::size_t s = 0; s < num_stages(); ++s) {
    if (stage_channels(s) % 2 != 0) {
      fail("stage " + std::to_string(s) + " has odd channel count " + std::to_string(stage_channels(s)));
    }
    if (s > 0 && channel_multipliers[s] != 2 * channel_multipliers[s - 1]) {
      fail("downsampling doubles channels, so channel_multipliers must double per stage");
    }
    fmm_hidden_width(stage_channels(s), fmm_ratio);
  }
  const std::size_t div = required_divisor();
  if (input_height == 0 || input_width == 0 || input_height % div != 0 || input_width % div != 0) {
    fail("input " + std::to_string(input_height) + "x" + std::to_string(input_width) +
         " must be divisible by " + std::to_string(div));
  }
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"input_size", {input_height, input_width}},
          {"in_channels", in_channels},
          {"base_channels", base_channels},
          {"stage_depths", stage_depths},
          {"channel_multipliers", channel_multipliers},
          {"embedding_dim", embedding_dim},
          {"fmm_ratio", fmm_ratio},
          {"topology", to_string(topology)},
          {"pooling", to_string(pooling)},
          {"l2_normalize_embedding", l2_normalize_embedding}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "input_size") {
      if (value.is_array() && value.size() == 2) {
        c.input_height = value[0].get<std::size_t>();
        c.input_width = value[1].get<std::size_t>();
      } else {
        c.input_height = c.input_width = value.get<std::size_t>();
      }
    } else if (key == "in_channels") {
      c.in_channels = value.get<std::size_t>();
    } else if (key == "base_channels") {
      c.base_channels = value.get<std::size_t>();
    } else if (key == "stage_depths") {
      c.stage_depths = value.get<std::vector<std::size_t>>();
    } else if (key == "channel_multipliers") {
      c.channel_multipliers = value.get<std::vector<std::size_t>>();
    } else if (key == "embedding_dim") {
      c.embedding_dim = value.get<std::size_t>();
    } else if (key == "fmm_ratio") {
      c.fmm_ratio = value.get<double>();
    } else if (key == "topology") {
      c.topology = parse_topology(value.get<std::string>());
    } else if (key == "pooling") {
      c.pooling = parse_pooling_mode(value.get<std::string>());
    } else if (key == "l2_normalize_embedding") {
      c.l2_normalize_embedding = value.get<bool>();
    } else {
      throw std::invalid_argument("backbone config: unknown key '" + key + "'");
    }
  }
  return c;
}

namespace {

template <typename T>
Tensor<T> patch_projection(const Tensor<T>& x, const ConvParams<T>& p, std::size_t patch, const char* op) {
  if (p.kernel != patch || p.stride != patch || p.padding != 0) {
    throw ShapeError(std::string(op) + ": expects a " + std::to_string(patch) + "x" + std::to_string(patch) +
                     " stride-" + std::to_string(patch) + " projection");
  }
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expects (N,C,H,W), got " + shape_str(x.shape()));
  if (x.dim(2) % patch != 0 || x.dim(3) % patch != 0) {
    throw ShapeError(std::string(op) + ": spatial size " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " is not divisible by " + std::to_string(patch));
  }
  return conv2d(x, p);
}

}  // namespace

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const ConvParams<T>& stem) {
  return patch_projection(images, stem, 4, "patch_embed");
}

template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const ConvParams<T>& merge) {
  return patch_projection(x, merge, 2, "downsample");
}

template <typename T>
Backbone<T>::Backbone(BackboneConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng = make_rng(seed, 0x6261636b);
  const std::size_t c0 = config_.base_channels;
  stem_ = make_conv<T>(config_.in_channels, c0, 4, 4, 0, 1, rng);
  for (std::size_t s = 0; s < config_.num_stages(); ++s) {
    Stage stage;
    const std::size_t c = config_.stage_channels(s);
    if (s > 0) stage.downsample = make_conv<T>(config_.stage_channels(s - 1), c, 2, 2, 0, 1, rng);
    for (std::size_t b = 0; b < config_.stage_depths[s]; ++b) {
      stage.blocks.push_back(make_block_params<T>(c, config_.fmm_ratio, rng));
    }
    stages_.push_back(std::move(stage));
  }
  const std::size_t last = config_.stage_channels(config_.num_stages() - 1);
  std::vector<T> w(config_.embedding_dim * last);
  for (auto& v : w) v = static_cast<T>(truncated_normal(rng, 0.02));
  head_weight_ = Tensor<T>({config_.embedding_dim, last}, std::move(w), true);
  head_bias_ = Tensor<T>::zeros({config_.embedding_dim}, true);
  register_params();
}

template <typename T>
void Backbone<T>::register_params() {
  params_.clear();
  auto add = [this](const std::string& name, Tensor<T>& t) { params_.push_back({name, t}); };
  add("stem.weight", stem_.weight);
  add("stem.bias", *stem_.bias);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string prefix = "stages." + std::to_string(s) + ".";
    if (stages_[s].downsample) {
      add(prefix + "downsample.weight", stages_[s].downsample->weight);
      add(prefix + "downsample.bias", *stages_[s].downsample->bias);
    }
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      const std::string block_prefix = prefix + "blocks." + std::to_string(b) + ".";
      for_each_param<T>(stages_[s].blocks[b],
                        [&](const std::string& name, Tensor<T>& t) { add(block_prefix + name, t); });
    }
  }
  add("head.weight", head_weight_);
  add("head.bias", head_bias_);
}

template <typename T>
Tensor<T>& Backbone<T>::param(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename T>
std::size_t Backbone<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
Tensor<T> Backbone<T>::forward(const Tensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != config_.in_channels ||
      images.dim(2) != config_.input_height || images.dim(3) != config_.input_width) {
    throw ShapeError("backbone expects (N," + std::to_string(config_.in_channels) + "," +
                     std::to_string(config_.input_height) + "," + std::to_string(config_.input_width) +
                     ") images, got " + shape_str(images.shape()));
  }
  auto h = patch_embed(images, stem_);
  for (const auto& stage : stages_) {
    if (stage.downsample) h = downsample(h, *stage.downsample);
    for (const auto& block : stage.blocks) {
      h = block_forward(h, block, config_.topology, config_.pooling);
    }
  }
  auto pooled = flatten(gap(h));
  auto embedding = linear(pooled, head_weight_, head_bias_);
  return config_.l2_normalize_embedding ? l2_normalize(embedding) : embedding;
}

#define PANET_INSTANTIATE_PATCH(T)                                   \
  template Tensor<T> patch_embed(const Tensor<T>&, const ConvParams<T>&); \
  template Tensor<T> downsample(const Tensor<T>&, const ConvParams<T>&);
PANET_INSTANTIATE_PATCH(float)
PANET_INSTANTIATE_PATCH(double)
PANET_INSTANTIATE_PATCH(long double)
#undef PANET_INSTANTIATE_PATCH

template class Backbone<float>;
template class Backbone<double>;
template class Backbone<long double>;

CountRow conv_count(std::string layer, std::uint64_t in_channels, std::uint64_t out_channels,
                    std::uint64_t kernel, std::uint64_t groups, std::uint64_t h_out, std::uint64_t w_out) {
  const std::uint64_t weights = out_channels * (in_channels / groups) * kernel * kernel;
  return {std::move(layer), weights + out_channels, weights * h_out * w_out};
}

std::vector<CountRow> count_ledger(const BackboneConfig& config) {
  config.validate();
  using U = std::uint64_t;
  std::vector<CountRow> rows;
  const U c0 = config.base_channels;
  auto [h0, w0] = config.stage_resolution(0);
  rows.push_back(conv_count("stem", config.in_channels, c0, 4, 1, h0, w0));
  for (std::size_t s = 0; s < config.num_stages(); ++s) {
    const U c = config.stage_channels(s);
    auto [h, w] = config.stage_resolution(s);
    const U hw = static_cast<U>(h) * w;
    if (s > 0) {
      rows.push_back(conv_count("stages." + std::to_string(s) + ".downsample",
                              config.stage_channels(s - 1), c, 2, 1, h, w));
    }
    const U hidden = fmm_hidden_width(c, config.fmm_ratio);
    for (std::size_t b = 0; b < config.stage_depths[s]; ++b) {
      const std::string name = "stages." + std::to_string(s) + ".blocks." + std::to_string(b);
      CountRow row{name, 0, 0};
      row.params += 2 * c;          // alpha, beta
      row.params += 2 * (2 * c);    // two layer norms
      row.params += c * 2 * c + 2 * c;          // PAM expansion
      row.params += 2 * c * 9 + 2 * c;          // depthwise 3x3
      row.params += c * c + c;                  // PAM projection
      row.params += c * hidden + hidden;        // FMM input
      row.params += (hidden / 2) * c + c;       // FMM output
      row.macs = (c * 2 * c + 2 * c * 9 + c * c + c * hidden + (hidden / 2) * c) * hw;
      rows.push_back(row);
    }
  }
  const U last = config.stage_channels(config.num_stages() - 1);
  rows.push_back({"head", last * config.embedding_dim + config.embedding_dim,
                  last * config.embedding_dim});
  return rows;
}

std::uint64_t count_params(const BackboneConfig& config) {
  std::uint64_t total = 0;
  for (const auto& row : count_ledger(config)) total += row.params;
  return total;
}

std::uint64_t count_macs(const BackboneConfig& config) {
  std::uint64_t total = 0;
  for (const auto& row : count_ledger(config)) total += row.macs;
  return total;
}

namespace {

constexpr char kMagic[8] = {'P', 'A', 'N', 'E', 'T', 'C', 'K', 'P'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  void bytes(char* out, std::size_t n, const char* what) {
    is_.read(out, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw std::runtime_error(std::string("checkpoint truncated while reading ") + what +
                               " at byte " + std::to_string(offset_));
    }
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  std::size_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::size_t offset_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Backbone<float>& model,
                     const nlohmann::json& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, kCheckpointVersion);
  const std::string header = nlohmann::json{{"config", model.config().to_json()}, {"meta", meta}}.dump();
  put_u32(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  put_u32(os, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : p.tensor.data()) put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  Reader r(is);
  char magic[8];
  r.bytes(magic, 8, "magic");
  if (std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint file (bad magic): " + path.string());
  }
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = r.u32("header length");
  std::string header(header_len, '\0');
  r.bytes(header.data(), header_len, "header");
  auto parsed = nlohmann::json::parse(header, nullptr, false);
  if (parsed.is_discarded() || !parsed.contains("config")) {
    throw std::runtime_error("checkpoint header is not valid JSON at byte 16");
  }
  LoadedCheckpoint out{Backbone<float>(BackboneConfig::from_json(parsed["config"]), 0),
                       parsed.value("meta", nlohmann::json::object())};
  const auto count = r.u32("parameter count");
  if (count != out.model.params().size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(count) + " parameters, config needs " +
                             std::to_string(out.model.params().size()));
  }
  for (auto& p : out.model.params()) {
    const auto name_len = r.u32("name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len, "parameter name");
    if (name != p.name) {
      throw std::runtime_error("checkpoint parameter '" + name + "' where '" + p.name +
                               "' was expected (byte " + std::to_string(r.offset()) + ")");
    }
    const auto rank = r.u32("rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32("dimension"));
    if (shape != p.tensor.shape()) {
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                               ", expected " + shape_str(p.tensor.shape()));
    }
    for (auto& v : p.tensor.mutable_data()) v = std::bit_cast<float>(r.u32("parameter data"));
  }
  return out;
}

}  // namespace panet
