#pragma once

#include <string>
#include <utility>
#include <vector>

#include "garnet/tensor.hpp"

namespace garnet {

// Parameter checkpoint file, magic "GARW1": for each named tensor a u32 name
// length, the UTF-8 name, u32 rank, u32 extents and the raw little-endian
// f64 payload. Round-trips bit-exactly.
void save_named_tensors(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& items);
std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::string& path);

} // namespace garnet
