#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "lapp/controller.hpp"
#include "lapp/io_util.hpp"

namespace lapp {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'A', 'P', 'P', 'C', 'K', 'P', '1'};
constexpr char kTrailer[8] = {'L', 'A', 'P', 'P', 'E', 'N', 'D', '!'};
constexpr uint32_t kVersion = 1;

json config_to_json(const RunConfig& c) {
  json j;
  j["arch"] = c.arch_name;
  j["c_target"] = c.c_target;
  j["lambda1"] = c.lambda1;
  j["lambda2"] = c.lambda2;
  j["total_epochs"] = c.total_epochs;
  j["prune_epoch_cap"] = c.prune_epoch_cap;
  j["batch_size"] = c.batch_size;
  j["base_lr"] = c.base_lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["bypass"] = c.bypass_kind;
  j["uniform"] = c.uniform;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir;
  j["out_dir"] = c.out_dir;
  j["train_subset"] = c.train_subset;
  j["channel_mean"] = c.channel_mean;
  j["channel_std"] = c.channel_std;
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  c.arch_name = j.at("arch").get<std::string>();
  c.c_target = j.at("c_target").get<double>();
  c.lambda1 = j.at("lambda1").get<double>();
  c.lambda2 = j.at("lambda2").get<double>();
  c.total_epochs = j.at("total_epochs").get<int>();
  c.prune_epoch_cap = j.at("prune_epoch_cap").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.base_lr = j.at("base_lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.bypass_kind = j.at("bypass").get<std::string>();
  c.uniform = j.at("uniform").get<bool>();
  c.seed = j.at("seed").get<uint64_t>();
  c.data_dir = j.at("data_dir").get<std::string>();
  c.out_dir = j.at("out_dir").get<std::string>();
  c.train_subset = j.at("train_subset").get<int>();
  c.channel_mean = j.at("channel_mean").get<std::array<double, 3>>();
  c.channel_std = j.at("channel_std").get<std::array<double, 3>>();
  return c;
}

void put_u32(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_u64(std::string& out, uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated archive");
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

void append_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<uint32_t>(t.rank()));
  for (size_t i = 0; i < t.rank(); ++i) put_u64(out, static_cast<uint64_t>(t.dim(i)));
  put_u64(out, static_cast<uint64_t>(t.numel()));
  out.append(reinterpret_cast<const char*>(t.data()),
             static_cast<size_t>(t.numel()) * sizeof(float));
}

}  // namespace

void checkpoint_save(const TrainState& state, const std::string& path) {
  json header;
  header["version"] = kVersion;
  header["config"] = config_to_json(state.config);
  header["phase"] = state.phase;
  header["epoch"] = state.epoch;
  header["iteration"] = state.iteration;
  header["surgery_epoch"] = state.surgery_epoch;
  header["surgery_iteration"] = state.surgery_iteration;
  header["closest_c_hat"] = state.closest_c_hat;
  header["uniform_rate"] = state.uniform_rate;
  header["t_total"] = state.flops.t_total;
  header["t_kept"] = state.flops.t_kept;
  header["data_rng"] = state.data_rng.state();
  json units = json::array();
  for (auto* unit : const_cast<TrainState&>(state).net->sbc_units()) {
    json ju;
    ju["name"] = unit->name();
    ju["compact"] = unit->mode() == SbcModule<float>::Mode::compact;
    ju["mask"] = unit->mask().hard;
    ju["kept"] = unit->kept_indices();
    units.push_back(std::move(ju));
  }
  header["units"] = std::move(units);
  const std::string header_str = header.dump();

  std::string payload;
  put_u64(payload, header_str.size());
  payload.append(header_str);

  auto& net = *const_cast<TrainState&>(state).net;
  const auto params = net.params();
  const auto buffers = net.buffers();
  put_u64(payload, params.size() * 2 + buffers.size());
  for (auto* p : params) {
    append_tensor(payload, p->name + "#v", p->value);
    append_tensor(payload, p->name + "#m", p->mom);
  }
  for (const auto& [name, t] : buffers) append_tensor(payload, name, *t);

  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
            static_cast<uInt>(payload.size())));
  std::string out;
  out.reserve(payload.size() + 24);
  out.append(kMagic, 8);
  out.append(payload);
  put_u32(out, crc);
  out.append(kTrailer, 8);
  write_file_atomic(path, out);
}

TrainState checkpoint_load(const std::string& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 28 || std::memcmp(buf.data(), kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: not a LAPP checkpoint: " + path);
  if (std::memcmp(buf.data() + buf.size() - 8, kTrailer, 8) != 0)
    throw std::runtime_error("checkpoint: corrupted trailer in " + path);
  const std::string payload = buf.substr(8, buf.size() - 20);
  uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - 12, 4);
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
            static_cast<uInt>(payload.size())));
  if (crc != stored_crc)
    throw std::runtime_error("checkpoint: checksum mismatch in " + path);

  Reader r{payload};
  const uint64_t header_len = r.u64();
  const json header = json::parse(r.bytes(header_len));
  if (header.at("version").get<uint32_t>() != kVersion)
    throw std::runtime_error("checkpoint: schema-version mismatch in " + path +
                             " (have " + std::to_string(header.at("version").get<uint32_t>()) +
                             ", want " + std::to_string(kVersion) + ")");

  TrainState st;
  st.config = config_from_json(header.at("config"));
  st.spec = build_arch_spec(st.config.arch_name);
  st.phase = header.at("phase").get<std::string>();
  st.epoch = header.at("epoch").get<int>();
  st.iteration = header.at("iteration").get<int64_t>();
  st.surgery_epoch = header.at("surgery_epoch").get<int>();
  st.surgery_iteration = header.at("surgery_iteration").get<int64_t>();
  st.closest_c_hat = header.at("closest_c_hat").get<double>();
  st.uniform_rate = header.at("uniform_rate").get<double>();
  st.flops.t_total = header.at("t_total").get<int64_t>();
  st.flops.t_kept = header.at("t_kept").get<int64_t>();
  st.flops.c_target = st.config.c_target;
  st.data_rng.set_state(header.at("data_rng").get<std::string>());

  st.net = build_sbcnet(st.spec, st.config.c_target,
                        bypass_kind_from_string(st.config.bypass_kind), st.config.seed);
  std::map<std::string, SbcModule<float>*> units;
  for (auto* u : st.net->sbc_units()) units[u->name()] = u;
  for (const auto& ju : header.at("units")) {
    auto it = units.find(ju.at("name").get<std::string>());
    if (it == units.end())
      throw std::runtime_error("checkpoint: unknown module '" +
                               ju.at("name").get<std::string>() + "' in " + path);
    if (ju.at("compact").get<bool>()) {
      it->second->restore_compact(ju.at("kept").get<std::vector<int64_t>>());
    }
    MaskBundle<float> m;
    m.hard = ju.at("mask").get<std::vector<uint8_t>>();
    m.soft.assign(m.hard.begin(), m.hard.end());
    m.importance.assign(m.hard.size(), 0.0f);
    m.kept_count = 0;
    for (uint8_t b : m.hard) m.kept_count += b;
    it->second->restore_mask(m);
  }

  std::map<std::string, Tensor<float>*> slots;
  for (auto* p : st.net->params()) {
    slots[p->name + "#v"] = &p->value;
    slots[p->name + "#m"] = &p->mom;
  }
  for (auto& [name, t] : st.net->buffers()) slots[name] = t;

  const uint64_t tensor_count = r.u64();
  if (tensor_count != slots.size())
    throw std::runtime_error("checkpoint: tensor count mismatch in " + path + " (archive " +
                             std::to_string(tensor_count) + ", model " +
                             std::to_string(slots.size()) + ")");
  for (uint64_t i = 0; i < tensor_count; ++i) {
    const uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    const uint32_t ndim = r.u32();
    std::vector<int64_t> dims(ndim);
    for (uint32_t d = 0; d < ndim; ++d) dims[d] = static_cast<int64_t>(r.u64());
    const uint64_t numel = r.u64();
    auto it = slots.find(name);
    if (it == slots.end())
      throw std::runtime_error("checkpoint: unexpected tensor '" + name + "' in " + path);
    Tensor<float>* dst = it->second;
    if (dst->shape() != dims)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "' in " + path);
    if (static_cast<int64_t>(numel) != dst->numel())
      throw std::runtime_error("checkpoint: size mismatch for '" + name + "' in " + path);
    const std::string raw = r.bytes(numel * sizeof(float));
    std::memcpy(dst->data(), raw.data(), raw.size());
  }
  return st;
}

}  // namespace lapp
