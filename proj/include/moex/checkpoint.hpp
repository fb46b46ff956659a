#pragma once

// Parameter checkpoints: a versioned binary blob of named tensors.
// Layout (all integers little-endian):
//   "MOEXCKPT" | u32 version | u32 count |
//   count × ( u32 name_len | name bytes | u64 n,c,h,w | n·c·h·w × f64 )

#include "moex/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace moex {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor4<double> value;
};

void write_checkpoint(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

/// Learnable tensors followed by batch-norm running statistics
/// ("<layer>.running_mean", "<layer>.running_var", "<layer>.updates").
template <typename Scalar>
std::vector<NamedTensor> checkpoint_tensors(const ResNetParams<Scalar>& params) {
  std::vector<NamedTensor> out;
  for (const auto& e : params.tensors) out.push_back({e.name, e.var.value().template cast<double>()});
  for (const auto& [name, st] : params.bn) {
    out.push_back({name + ".running_mean", st.running_mean.template cast<double>()});
    out.push_back({name + ".running_var", st.running_var.template cast<double>()});
    out.push_back({name + ".updates", Tensor4<double>::scalar(double(st.updates))});
  }
  return out;
}

/// Overwrites every tensor of `params` from the blob; names and shapes must match exactly.
template <typename Scalar>
void restore_checkpoint(ResNetParams<Scalar>& params, const std::vector<NamedTensor>& blob) {
  std::unordered_map<std::string, const Tensor4<double>*> by_name;
  for (const auto& t : blob) by_name[t.name] = &t.value;
  auto take = [&](const std::string& name, Shape4 shape) -> const Tensor4<double>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    if (it->second->shape() != shape)
      throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " + it->second->shape().str() +
                               ", model expects " + shape.str());
    return *it->second;
  };
  std::size_t expected = params.tensors.size() + 3 * params.bn.size();
  if (blob.size() != expected) throw std::runtime_error("checkpoint: tensor count does not match the model");
  for (auto& e : params.tensors) e.var.mutable_value() = take(e.name, e.var.shape()).template cast<Scalar>();
  for (auto& [name, st] : params.bn) {
    st.running_mean = take(name + ".running_mean", st.running_mean.shape()).template cast<Scalar>();
    st.running_var = take(name + ".running_var", st.running_var.shape()).template cast<Scalar>();
    st.updates = static_cast<long>(take(name + ".updates", Shape4{1, 1, 1, 1}).item());
  }
}

}  // namespace moex
