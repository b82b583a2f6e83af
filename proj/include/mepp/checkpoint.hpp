#ifndef MEPP_CHECKPOINT_HPP
#define MEPP_CHECKPOINT_HPP

#include <map>
#include <string>

#include "mepp/graph.hpp"
#include "mepp/tensor.hpp"

namespace mepp {

// Named-tensor container: magic "MEPPCKPT", u32 format version, u32 tensor
// count, then per tensor a length-prefixed name, u32 rank, u64 extents and
// raw little-endian 64-bit floats.
inline constexpr char kCheckpointMagic[8] = {'M', 'E', 'P', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

// Convenience wrappers over a graph's parameter table.
void save_parameters(const std::string& path, const Graph& graph);
// Loads values into existing parameters; every name must match in shape.
void load_parameters(const std::string& path, Graph& graph);

} // namespace mepp

#endif
