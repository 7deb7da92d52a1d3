#include "flowkrig/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include "flowkrig/io.hpp"

namespace flowkrig {

static_assert(std::endian::native == std::endian::little, "checkpoint code assumes a little-endian host");

namespace {

constexpr std::string_view kMagic = "STCAGCN1";

std::string config_block(const TrainedModel& m) {
  const ModelConfig& c = m.config;
  std::string s;
  auto kv = [&](const char* k, const std::string& v) { s += std::string(k) + "=" + v + "\n"; };
  kv("model.diffusion_steps", std::to_string(c.diffusion_steps));
  kv("model.hidden_dim", std::to_string(c.hidden_dim));
  kv("model.num_tdcn_layers", std::to_string(c.num_tdcn_layers));
  kv("model.tcn_kernel", std::to_string(c.tcn_kernel));
  kv("model.num_tcn_layers", std::to_string(c.num_tcn_layers));
  kv("model.seq_len", std::to_string(c.seq_len));
  kv("model.topk", std::to_string(c.topk));
  kv("model.leaky_slope", format_double(c.leaky_slope));
  kv("model.attention_scale", attention_scale_name(c.attention_scale));
  kv("scaler.min", format_double(m.scaler.min));
  kv("scaler.max", format_double(m.scaler.max));
  kv("graph.delta", format_double(m.kernel.delta));
  kv("graph.epsilon", format_double(m.kernel.epsilon));
  return s;
}

std::vector<std::uint32_t> stored_dims(const Shape& s) {
  std::size_t first = 0;
  while (first < 3 && s[first] == 1) ++first;
  return {s.begin() + static_cast<std::ptrdiff_t>(first), s.end()};
}

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, b_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    const auto v = b_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  std::string_view rest() const { return b_.substr(pos_); }

 private:
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

std::size_t to_size(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("checkpoint config is missing '" + key + "'");
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing text");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint config '" + key + "' is not an integer: '" + it->second + "'");
  }
}

double to_double(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("checkpoint config is missing '" + key + "'");
  try {
    return parse_double(it->second);
  } catch (const IoError& e) {
    throw CheckpointError("checkpoint config '" + key + "': " + e.what());
  }
}

}  // namespace

std::string serialize_model(const TrainedModel& m) {
  std::string out(kMagic);
  const auto& params = m.state.params();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const auto dims = stored_dims(p.tensor.shape());
    put_u32(out, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) put_u32(out, d);
    const auto v = p.tensor.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  out += config_block(m);
  return out;
}

std::size_t expected_checkpoint_size(const TrainedModel& m) {
  std::size_t n = kMagic.size() + 4;
  for (const auto& p : m.state.params()) n += 4 + p.name.size() + 4 + 4 * stored_dims(p.tensor.shape()).size() + 8 * p.tensor.size();
  return n + config_block(m).size();
}

TrainedModel deserialize_model(std::string_view bytes) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw CheckpointError("not a checkpoint: magic bytes mismatch");
  }
  Reader rd(bytes.substr(kMagic.size()));
  struct Record {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<double> values;
  };
  const std::uint32_t n_params = rd.u32("parameter count");
  if (n_params > bytes.size()) throw CheckpointError("checkpoint truncated: parameter count exceeds file size");
  std::vector<Record> recs(n_params);
  for (auto& r : recs) {
    const auto len = rd.u32("name length");
    r.name = std::string(rd.bytes(len, "parameter name"));
    const auto rank = rd.u32("rank");
    if (rank == 0 || rank > 4) throw CheckpointError("parameter '" + r.name + "' has invalid rank " + std::to_string(rank));
    std::size_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      r.dims.push_back(rd.u32("dims"));
      count *= r.dims.back();
      if (count > bytes.size()) throw CheckpointError("checkpoint truncated while reading parameter '" + r.name + "'");
    }
    const auto raw = rd.bytes(count * sizeof(double), "parameter values");
    r.values.resize(count);
    std::memcpy(r.values.data(), raw.data(), raw.size());
  }

  std::map<std::string, std::string> kv;
  const std::string_view text = rd.rest();
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw CheckpointError("malformed config line '" + std::string(line) + "'");
    kv[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
  }

  TrainedModel m;
  ModelConfig& c = m.config;
  c.diffusion_steps = static_cast<unsigned>(to_size(kv, "model.diffusion_steps"));
  c.hidden_dim = to_size(kv, "model.hidden_dim");
  c.num_tdcn_layers = to_size(kv, "model.num_tdcn_layers");
  c.tcn_kernel = to_size(kv, "model.tcn_kernel");
  c.num_tcn_layers = to_size(kv, "model.num_tcn_layers");
  c.seq_len = to_size(kv, "model.seq_len");
  c.topk = to_size(kv, "model.topk");
  c.leaky_slope = to_double(kv, "model.leaky_slope");
  try {
    c.attention_scale = parse_attention_scale(kv.count("model.attention_scale") ? kv.at("model.attention_scale") : "");
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  m.scaler = {to_double(kv, "scaler.min"), to_double(kv, "scaler.max")};
  m.kernel = {to_double(kv, "graph.delta"), to_double(kv, "graph.epsilon")};

  Rng unused(0);
  m.state = ModelState(c, unused);
  auto& params = m.state.params();
  if (params.size() != recs.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(recs.size()) + " parameters, config implies " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < recs.size(); ++i) {
    auto& p = params[i];
    if (recs[i].name != p.name) {
      throw CheckpointError("parameter " + std::to_string(i) + " is '" + recs[i].name + "', expected '" + p.name + "'");
    }
    if (recs[i].dims != stored_dims(p.tensor.shape())) {
      throw CheckpointError("parameter '" + p.name + "' shape does not match the config " + shape_str(p.tensor.shape()));
    }
    std::ranges::copy(recs[i].values, p.tensor.mutable_values().begin());
  }
  return m;
}

void save_model(const std::filesystem::path& path, const TrainedModel& model) {
  write_file_atomic(path, serialize_model(model));
}

TrainedModel load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

}  // namespace flowkrig
