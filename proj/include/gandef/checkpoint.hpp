#pragma once

// Parameter checkpoints.
//
// Binary layout (all integers and floats little-endian):
//   char[8]  magic "GANDEFCK"
//   u32      format version (1)
//   u32      arch id length, followed by the arch id bytes
//   u32      layer count (parameterized layers)
//   per layer:
//     u32    layer index in the ModelSpec
//     2 x { u32 rank, u64 dims[rank], f64 values[prod(dims)] }   weight then bias
//
// A JSON sidecar at <path>.json records seed, epoch and optimizer metadata.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <span>
#include <vector>

#include <json.hpp>

#include "gandef/error.hpp"
#include "gandef/model.hpp"
#include "gandef/optim.hpp"

namespace gandef {

struct CheckpointMeta {
  std::string arch_id;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string dataset;
  std::string defense;
  OptimizerConfig optimizer;
  std::uint64_t optimizer_step = 0;
};

namespace detail {

constexpr std::array<char, 8> kCheckpointMagic{'G', 'A', 'N', 'D', 'E', 'F', 'C', 'K'};

template <typename T>
void put_le(std::ostream& os, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_floating_point_v<T>) {
    bits = std::bit_cast<std::uint64_t>(static_cast<double>(v));
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(buf, sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  require(static_cast<std::size_t>(is.gcount()) == sizeof(T), ErrorKind::TruncatedFile, "checkpoint ended early");
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<double>(bits);
  } else {
    return static_cast<T>(bits);
  }
}

inline void put_tensor(std::ostream& os, const Tensor& t) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(os, d);
  for (double v : t.data()) put_le<double>(os, v);
}

inline Tensor get_tensor(std::istream& is) {
  const auto rank = get_le<std::uint32_t>(is);
  require(rank <= 8, ErrorKind::BadMagic, "implausible tensor rank in checkpoint");
  Shape s(rank);
  for (auto& d : s) d = get_le<std::uint64_t>(is);
  Tensor t(s);
  for (auto& v : t.data()) v = get_le<double>(is);
  return t;
}

}  // namespace detail

inline nlohmann::json meta_to_json(const CheckpointMeta& m) {
  return {{"arch_id", m.arch_id},
          {"seed", m.seed},
          {"epoch", m.epoch},
          {"dataset", m.dataset},
          {"defense", m.defense},
          {"optimizer",
           {{"kind", to_string(m.optimizer.kind)},
            {"learning_rate", m.optimizer.learning_rate},
            {"beta1", m.optimizer.beta1},
            {"beta2", m.optimizer.beta2},
            {"epsilon", m.optimizer.epsilon},
            {"momentum", m.optimizer.momentum},
            {"weight_decay", m.optimizer.weight_decay},
            {"step", m.optimizer_step}}}};
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.arch_id = j.at("arch_id").get<std::string>();
  m.seed = j.value("seed", std::uint64_t{0});
  m.epoch = j.value("epoch", 0);
  m.dataset = j.value("dataset", std::string{});
  m.defense = j.value("defense", std::string{});
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    m.optimizer.kind = o.value("kind", std::string{"adam"}) == "momentum" ? OptimizerKind::Momentum : OptimizerKind::Adam;
    m.optimizer.learning_rate = o.value("learning_rate", 1e-4);
    m.optimizer.beta1 = o.value("beta1", 0.9);
    m.optimizer.beta2 = o.value("beta2", 0.999);
    m.optimizer.epsilon = o.value("epsilon", 1e-8);
    m.optimizer.momentum = o.value("momentum", 0.9);
    m.optimizer.weight_decay = o.value("weight_decay", 0.0);
    m.optimizer_step = o.value("step", std::uint64_t{0});
  }
  return m;
}

inline void save_checkpoint(const std::string& path, const ParamSet& params, const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::IoFailure, "cannot write " + path);
  os.write(detail::kCheckpointMagic.data(), detail::kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(os, 1);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(meta.arch_id.size()));
  os.write(meta.arch_id.data(), static_cast<std::streamsize>(meta.arch_id.size()));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.owners.size()));
  for (std::size_t i = 0; i < params.owners.size(); ++i) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.owners[i]));
    detail::put_tensor(os, params.tensors[2 * i]);
    detail::put_tensor(os, params.tensors[2 * i + 1]);
  }
  require(static_cast<bool>(os), ErrorKind::IoFailure, "write failed for " + path);
  std::ofstream js(path + ".json");
  require(static_cast<bool>(js), ErrorKind::IoFailure, "cannot write " + path + ".json");
  js << meta_to_json(meta).dump(2) << '\n';
}

struct LoadedCheckpoint {
  ParamSet params;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::IoFailure, "cannot open " + path);
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  require(is.gcount() == 8 && magic == detail::kCheckpointMagic, ErrorKind::BadMagic, path + " is not a checkpoint");
  const auto version = detail::get_le<std::uint32_t>(is);
  require(version == 1, ErrorKind::BadMagic, "unsupported checkpoint version");
  const auto id_len = detail::get_le<std::uint32_t>(is);
  std::string arch(id_len, '\0');
  is.read(arch.data(), id_len);
  require(static_cast<std::uint32_t>(is.gcount()) == id_len, ErrorKind::TruncatedFile, "checkpoint ended early");
  LoadedCheckpoint out;
  const auto layers = detail::get_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < layers; ++i) {
    out.params.owners.push_back(detail::get_le<std::uint32_t>(is));
    out.params.tensors.push_back(detail::get_tensor(is));
    out.params.tensors.push_back(detail::get_tensor(is));
  }
  std::ifstream js(path + ".json");
  if (js) {
    out.meta = meta_from_json(nlohmann::json::parse(js));
  }
  out.meta.arch_id = arch;
  return out;
}

/// Labeled example batch (e.g. adversarial examples): magic "GANDEFEX",
/// u32 version, the image tensor, then u64 count and u32 labels.
inline void save_examples(const std::string& path, const Tensor& x, std::span<const int> labels) {
  require(x.rank() >= 1 && x.dim(0) == labels.size(), ErrorKind::ShapeMismatch, "examples vs labels");
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::IoFailure, "cannot write " + path);
  os.write("GANDEFEX", 8);
  detail::put_le<std::uint32_t>(os, 1);
  detail::put_tensor(os, x);
  detail::put_le<std::uint64_t>(os, labels.size());
  for (int t : labels) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t));
  require(static_cast<bool>(os), ErrorKind::IoFailure, "write failed for " + path);
}

struct LoadedExamples {
  Tensor x;
  std::vector<int> labels;
};

inline LoadedExamples load_examples(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::IoFailure, "cannot open " + path);
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  require(is.gcount() == 8 && std::string(magic.data(), 8) == "GANDEFEX", ErrorKind::BadMagic,
          path + " is not an example file");
  require(detail::get_le<std::uint32_t>(is) == 1, ErrorKind::BadMagic, "unsupported example file version");
  LoadedExamples out{detail::get_tensor(is), {}};
  const auto n = detail::get_le<std::uint64_t>(is);
  require(out.x.rank() >= 1 && n == out.x.dim(0), ErrorKind::CountMismatch, "example and label counts differ");
  for (std::uint64_t i = 0; i < n; ++i) out.labels.push_back(static_cast<int>(detail::get_le<std::uint32_t>(is)));
  return out;
}

}  // namespace gandef
