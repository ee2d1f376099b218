#include "ien/model.hpp"

#include <cmath>

#include "ien/blob.hpp"
#include "ien/ops.hpp"
#include "ien/rng.hpp"

namespace ien {

namespace {

constexpr std::string_view kCheckpointMagic = "IENC";

std::string level(const char* prefix, std::size_t l) { return std::string(prefix) + std::to_string(l); }

Shape conv_shape(std::size_t out, std::size_t in, std::size_t k) { return {out, in, k, k}; }

}  // namespace

IenConfig IenConfig::reference(std::size_t hand_channels, bool use_affordance) {
  IenConfig c;
  c.hand_channels = hand_channels;
  c.use_affordance = use_affordance;
  return c;
}

void IenConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigMismatch("invalid IEN config: " + msg); };
  if (grid.height <= 0 || grid.width <= 0) fail("grid must be non-empty");
  const int scale = 1 << depth;
  if (depth > 6 || grid.height % scale != 0 || grid.width % scale != 0) fail("grid must be divisible by 2^depth");
  if (encoder_widths.size() != depth + 1) fail("encoder_widths must have depth+1 entries");
  for (std::size_t w : encoder_widths) {
    if (w == 0) fail("encoder widths must be positive");
  }
  if (affordance_channels != kSceneChannels) fail("affordance input has five channels");
  if (hand_channels != 1 && hand_channels != 3) fail("hand frames have 1 (depth) or 3 (RGB) channels");
  if (convlstm_hidden == 0 || affordance_features == 0) fail("channel counts must be positive");
  if (convlstm_kernel % 2 == 0) fail("ConvLSTM kernel must be odd");
  if (max_sequence == 0) fail("max_sequence must be positive");
}

json IenConfig::to_json() const {
  return {{"grid", {grid.height, grid.width}},
          {"affordance_channels", affordance_channels},
          {"hand_channels", hand_channels},
          {"convlstm_hidden", convlstm_hidden},
          {"convlstm_kernel", convlstm_kernel},
          {"affordance_features", affordance_features},
          {"encoder_widths", encoder_widths},
          {"depth", depth},
          {"use_affordance", use_affordance},
          {"max_sequence", max_sequence}};
}

IenConfig IenConfig::from_json(const json& j) {
  IenConfig c;
  try {
    // Missing keys keep their reference values, so a config file may override a subset.
    if (j.contains("grid")) c.grid = {j.at("grid").at(0).get<int>(), j.at("grid").at(1).get<int>()};
    c.affordance_channels = j.value("affordance_channels", c.affordance_channels);
    c.hand_channels = j.value("hand_channels", c.hand_channels);
    c.convlstm_hidden = j.value("convlstm_hidden", c.convlstm_hidden);
    c.convlstm_kernel = j.value("convlstm_kernel", c.convlstm_kernel);
    c.affordance_features = j.value("affordance_features", c.affordance_features);
    c.encoder_widths = j.value("encoder_widths", c.encoder_widths);
    c.depth = j.value("depth", c.encoder_widths.size() - 1);
    c.use_affordance = j.value("use_affordance", c.use_affordance);
    c.max_sequence = j.value("max_sequence", c.max_sequence);
  } catch (const json::exception& e) {
    throw ConfigMismatch(std::string("malformed IEN config: ") + e.what());
  }
  c.validate();
  return c;
}

std::map<std::string, Shape> parameter_shapes(const IenConfig& c) {
  c.validate();
  std::map<std::string, Shape> shapes;
  const std::size_t hid = c.convlstm_hidden;
  const std::size_t feat = c.affordance_features;
  shapes["lstm.kernel"] = conv_shape(4 * hid, c.hand_channels + hid, c.convlstm_kernel);
  shapes["lstm.bias"] = {4 * hid};
  shapes["aff.conv0.kernel"] = conv_shape(feat, c.affordance_channels, 3);
  shapes["aff.conv0.bias"] = {feat};
  shapes["aff.conv1.kernel"] = conv_shape(feat, feat, 3);
  shapes["aff.conv1.bias"] = {feat};
  for (std::size_t l = 0; l <= c.depth; ++l) {
    const std::size_t in = l == 0 ? hid + feat : c.encoder_widths[l - 1];
    shapes[level("enc", l) + ".kernel"] = conv_shape(c.encoder_widths[l], in, 3);
    shapes[level("enc", l) + ".bias"] = {c.encoder_widths[l]};
  }
  for (std::size_t l = 0; l < c.depth; ++l) {
    const std::size_t w = c.encoder_widths[l];
    shapes[level("dec", l) + ".up.kernel"] = conv_shape(w, c.encoder_widths[l + 1], 3);
    shapes[level("dec", l) + ".up.bias"] = {w};
    shapes[level("dec", l) + ".merge.kernel"] = conv_shape(w, 2 * w, 3);
    shapes[level("dec", l) + ".merge.bias"] = {w};
  }
  shapes["head.kernel"] = conv_shape(1, c.encoder_widths[0], 1);
  shapes["head.bias"] = {1};
  return shapes;
}

std::size_t parameter_count(const IenConfig& config) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_shapes(config)) n += shape_size(shape);
  return n;
}

IenParams init_params(const IenConfig& config, std::uint64_t seed) {
  IenParams params;
  std::uint64_t stream = 0;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    TensorF t(shape);
    if (shape.size() == 4) {
      const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
      double bound = std::sqrt(6.0 / fan_in);
      if (name == "head.kernel") bound *= 0.1;
      Rng rng(mix_seed(seed, stream));
      for (float& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    } else if (name == "lstm.bias") {
      const std::size_t hid = config.convlstm_hidden;
      for (std::size_t i = hid; i < 2 * hid; ++i) t[i] = 1.0f;  // forget gate
    }
    ++stream;
    params.emplace(name, std::move(t));
  }
  return params;
}

template <typename T>
VarMap bind_params(Graph<T>& g, const ParamMap<T>& params) {
  VarMap vars;
  for (const auto& [name, p] : params) vars.emplace(name, g.parameter(p));
  return vars;
}

namespace {

template <typename T>
Var conv(Graph<T>& g, const VarMap& v, const std::string& name, Var x, int pad = 1) {
  return conv2d(g, x, v.at(name + ".kernel"), v.at(name + ".bias"), 1, pad);
}

template <typename T>
void check_inputs(const IenConfig& c, const Tensor<T>& affordance, const Tensor<T>& hand_seq) {
  const auto h = static_cast<std::size_t>(c.grid.height);
  const auto w = static_cast<std::size_t>(c.grid.width);
  if (affordance.shape() != Shape{c.affordance_channels, h, w}) {
    throw ShapeMismatch("IEN affordance input " + shape_string(affordance.shape()) + " does not match config");
  }
  if (hand_seq.rank() != 4 || hand_seq.dim(1) != c.hand_channels || hand_seq.dim(2) != h || hand_seq.dim(3) != w) {
    throw ShapeMismatch("IEN hand sequence " + shape_string(hand_seq.shape()) + " does not match config");
  }
}

template <typename T>
Tensor<T> frame(const Tensor<T>& seq, std::size_t t) {
  return seq.slice0(t, 1).reshaped({seq.dim(1), seq.dim(2), seq.dim(3)});
}

// Returns the hidden map after each of the first `steps` frames.
template <typename T>
std::vector<Var> roll_convlstm(Graph<T>& g, const VarMap& v, const IenConfig& c, const Tensor<T>& hand_seq,
                               std::size_t steps) {
  const Shape state{c.convlstm_hidden, static_cast<std::size_t>(c.grid.height), static_cast<std::size_t>(c.grid.width)};
  Var h = g.constant(Tensor<T>(state));
  Var cell = g.constant(Tensor<T>(state));
  const ConvLstmWeights weights{v.at("lstm.kernel"), v.at("lstm.bias")};
  std::vector<Var> hidden;
  for (std::size_t t = 0; t < steps; ++t) {
    std::tie(h, cell) = convlstm_cell(g, g.constant(frame(hand_seq, t)), h, cell, weights);
    hidden.push_back(h);
  }
  return hidden;
}

template <typename T>
Var affordance_features(Graph<T>& g, const VarMap& v, const IenConfig& c, Var affordance) {
  if (!c.use_affordance) {
    return g.constant(Tensor<T>({c.affordance_features, static_cast<std::size_t>(c.grid.height),
                                 static_cast<std::size_t>(c.grid.width)}));
  }
  return relu(g, conv(g, v, "aff.conv1", relu(g, conv(g, v, "aff.conv0", affordance))));
}

template <typename T>
Var decode(Graph<T>& g, const VarMap& v, const IenConfig& c, Var hidden, Var features) {
  std::vector<Var> skips;
  Var x = relu(g, conv(g, v, "enc0", concat_channels(g, hidden, features)));
  skips.push_back(x);
  for (std::size_t l = 1; l <= c.depth; ++l) {
    x = relu(g, conv(g, v, level("enc", l), maxpool2d(g, x)));
    skips.push_back(x);
  }
  for (std::size_t l = c.depth; l-- > 0;) {
    const Var up = relu(g, conv(g, v, level("dec", l) + ".up", upsample2d(g, x)));
    x = relu(g, conv(g, v, level("dec", l) + ".merge", concat_channels(g, up, skips[l])));
  }
  return softmax_spatial(g, conv(g, v, "head", x, 0));
}

}  // namespace

template <typename T>
Var forward(Graph<T>& g, const VarMap& vars, const IenConfig& config, Var affordance, const Tensor<T>& hand_seq) {
  check_inputs(config, g.value(affordance), hand_seq);
  const std::size_t length = hand_seq.dim(0);
  if (length == 0) throw TooShort("hand sequence is empty");
  if (length > config.max_sequence) {
    throw SequenceTooLong("hand sequence of " + std::to_string(length) + " frames exceeds the limit of " +
                          std::to_string(config.max_sequence));
  }
  const std::vector<Var> hidden = roll_convlstm(g, vars, config, hand_seq, length);
  return decode(g, vars, config, hidden.back(), affordance_features(g, vars, config, affordance));
}

TensorF predict(const IenParams& params, const IenConfig& config, const TensorF& affordance, const TensorF& hand_seq) {
  Graph<float> g(false);
  const VarMap vars = bind_params(g, params);
  return g.value(forward(g, vars, config, g.constant(affordance), hand_seq));
}

std::vector<TensorF> predict_prefixes(const IenParams& params, const IenConfig& config, const TensorF& affordance,
                                      const TensorF& hand_seq, const std::vector<std::size_t>& lengths) {
  check_inputs(config, affordance, hand_seq);
  std::size_t longest = 0;
  for (std::size_t k : lengths) {
    if (k == 0 || k > hand_seq.dim(0)) throw TooShort("prefix length " + std::to_string(k) + " is not available");
    if (k > config.max_sequence) throw SequenceTooLong("prefix of " + std::to_string(k) + " frames exceeds the limit");
    longest = std::max(longest, k);
  }
  Graph<float> g(false);
  const VarMap vars = bind_params(g, params);
  const std::vector<Var> hidden = roll_convlstm(g, vars, config, hand_seq, longest);
  const Var features = affordance_features(g, vars, config, g.constant(affordance));
  std::vector<TensorF> out;
  for (std::size_t k : lengths) out.push_back(g.value(decode(g, vars, config, hidden[k - 1], features)));
  return out;
}

std::string encode_checkpoint(const Model& model) {
  model.config.validate();
  Archive archive;
  json entries = json::array();
  for (const auto& [name, p] : model.params) {
    entries.push_back({{"name", name}, {"offset", archive.payload.size()}, {"shape", p.shape()}});
    append_blob(archive.payload, p);
  }
  archive.manifest = {{"format", "ien-checkpoint"},
                      {"version", 1},
                      {"config", model.config.to_json()},
                      {"parameters", entries},
                      {"payload_bytes", archive.payload.size()}};
  return encode_archive(kCheckpointMagic, archive);
}

Model decode_checkpoint(std::string_view bytes) {
  const Archive archive = decode_archive(kCheckpointMagic, bytes);
  const json& m = archive.manifest;
  Model model;
  std::map<std::string, Shape> expected;
  try {
    if (m.at("format") != "ien-checkpoint") throw CorruptArchive("not a checkpoint archive");
    if (m.at("payload_bytes").get<std::size_t>() != archive.payload.size()) throw CorruptArchive("checkpoint payload truncated");
    model.config = IenConfig::from_json(m.at("config"));
    expected = parameter_shapes(model.config);
    std::size_t cursor = 0;
    for (const json& e : m.at("parameters")) {
      const auto name = e.at("name").get<std::string>();
      std::size_t offset = e.at("offset").get<std::size_t>();
      if (offset != cursor) throw CorruptArchive("checkpoint blob offset mismatch for '" + name + "'");
      TensorF t = decode_blob<float>(archive.payload, offset);
      cursor = offset;
      auto it = expected.find(name);
      if (it == expected.end()) throw ConfigMismatch("checkpoint has unexpected parameter '" + name + "'");
      if (t.shape() != it->second || e.at("shape").get<Shape>() != it->second) {
        throw ConfigMismatch("parameter '" + name + "' has shape " + shape_string(t.shape()) + ", config implies " +
                             shape_string(it->second));
      }
      if (!t.all_finite()) throw CorruptArchive("parameter '" + name + "' holds non-finite values");
      model.params.emplace(name, std::move(t));
    }
    if (cursor != archive.payload.size()) throw CorruptArchive("unreferenced bytes in checkpoint payload");
  } catch (const json::exception& e) {
    throw CorruptArchive(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (model.params.size() != expected.size()) throw ConfigMismatch("checkpoint is missing parameters for its config");
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) { write_file(path, encode_checkpoint(model)); }

Model load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

template VarMap bind_params<float>(Graph<float>&, const ParamMap<float>&);
template VarMap bind_params<double>(Graph<double>&, const ParamMap<double>&);
template Var forward<float>(Graph<float>&, const VarMap&, const IenConfig&, Var, const Tensor<float>&);
template Var forward<double>(Graph<double>&, const VarMap&, const IenConfig&, Var, const Tensor<double>&);

}  // namespace ien
