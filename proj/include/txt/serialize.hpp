#pragma once

// Portable tensor file format.
//
//   tensor record : u64 rank, u64 extents[rank], f64 values[prod(extents)]
//   checkpoint    : u64 count, then per entry u64 name_length, name bytes,
//                   tensor record
//
// All integers and floats are little-endian regardless of host order.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "txt/tensor.hpp"

namespace txt {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

/// Copies values from `source` into same-named entries of `target`, which must
/// match in names and shapes.
void assign_tensors(const NamedTensors& target, const NamedTensors& source);

}  // namespace txt
