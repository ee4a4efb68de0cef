#ifndef DCV_CHECKPOINT_HPP
#define DCV_CHECKPOINT_HPP

// safetensors-style container: u64 little-endian header length, a JSON
// header (tensor name -> dtype, shape, byte offsets, plus string
// "__metadata__"), then raw little-endian float32 data.

#include "dcv/dc_ae_v.hpp"
#include "dcv/toy_dit.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <utility>

namespace dcv {

using Metadata = std::map<std::string, std::string>;

void save_tensors(const std::filesystem::path& path, const ParamStore<float>& tensors, const Metadata& metadata);
std::pair<ParamStore<float>, Metadata> load_tensors(const std::filesystem::path& path);

void save_autoencoder(const std::filesystem::path& path, const AEParams<float>& params);
AEParams<float> load_autoencoder(const std::filesystem::path& path);

void save_dit(const std::filesystem::path& path, const DiTModel<float>& model);
DiTModel<float> load_dit(const std::filesystem::path& path);

}  // namespace dcv

#endif  // DCV_CHECKPOINT_HPP
