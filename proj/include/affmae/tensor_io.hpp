#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "affmae/tensor.hpp"

namespace affmae {

// AFT1 binary tensor container:
//   magic "AFT1", u8 dtype (0=b32, 1=b16emu, 2=u8), u32 ndim,
//   ndim x u64 extents, raw payload. All integers and floats little-endian.
// b64 tensors are stored as b32 (the container has no b64 code).

void write_aft(const std::string& path, const Tensor& t);
void write_aft_u8(const std::string& path, const std::vector<int64_t>& dims,
                  const std::vector<uint8_t>& bytes);

// dtype_out (optional) receives the on-disk dtype code. u8 payloads load as a
// b32 tensor of byte values.
Tensor read_aft(const std::string& path, uint8_t* dtype_out = nullptr);

// Portable pixmap writers for previews and token maps. gray is row-major
// [h x w] in [0,1]; rgb is [h x w x 3].
void write_pgm(const std::string& path, int64_t h, int64_t w, const std::vector<double>& gray);
void write_ppm(const std::string& path, int64_t h, int64_t w, const std::vector<double>& rgb);
std::vector<double> read_pgm(const std::string& path, int64_t& h, int64_t& w);

} // namespace affmae
