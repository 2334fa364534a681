#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "layerforge/tensor.hpp"

namespace layerforge {

// LTENS dump: magic "LTENS1", u32 LE rank, rank × u32 LE dims, then the
// row-major payload as 32-bit LE IEEE floats.

void write_ltens(std::ostream& out, const Tensor& t);
Tensor read_ltens(std::istream& in);

void save_ltens(const std::filesystem::path& path, const Tensor& t);
Tensor load_ltens(const std::filesystem::path& path);

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t value);

}  // namespace layerforge
