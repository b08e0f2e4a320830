#pragma once

#include <iosfwd>
#include <string>

#include "clstm/tensor.hpp"

namespace clstm {

// Tensor blob format: little-endian, magic "STNT", version u32, rank u32,
// extents u64[rank], then float64 payload in row-major order.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace clstm
