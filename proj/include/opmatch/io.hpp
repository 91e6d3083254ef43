#pragma once

#include <map>
#include <string>

#include "opmatch/tensor.hpp"

namespace opmatch::io {

// OPMT tensor file: magic "OPMT", u32 rank, u32 extents (little-endian),
// then 64-bit little-endian doubles, row-major. Used for checkpoints,
// corpus patches and oracle fixtures.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Named-tensor archive: magic "OPMA", u32 count, then per entry a u32 name
// length, the name bytes, and an embedded OPMT record.
void save_archive(const std::string& path,
                  const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_archive(const std::string& path);

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace opmatch::io
