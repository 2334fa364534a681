#include "layerforge/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>

namespace layerforge {

namespace {

constexpr std::array<char, 6> kMagic = {'L', 'T', 'E', 'N', 'S', '1'};
constexpr std::uint32_t kMaxRank = 8;

void put_u32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> bytes = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(bytes.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
    std::array<unsigned char, 4> b{};
    in.read(reinterpret_cast<char*>(b.data()), 4);
    if (!in) throw IoError("LTENS: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_ltens(std::ostream& out, const Tensor& t) {
    out.write(kMagic.data(), kMagic.size());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float x : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(x));
    if (!out) throw IoError("LTENS: write failed");
}

Tensor read_ltens(std::istream& in) {
    std::array<char, 6> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw IoError("LTENS: bad magic");
    const std::uint32_t rank = get_u32(in);
    if (rank == 0 || rank > kMaxRank) throw IoError("LTENS: unsupported rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
        d = get_u32(in);
        if (d == 0) throw IoError("LTENS: zero dimension");
    }
    std::vector<float> data(shape_product(shape));
    for (auto& x : data) x = std::bit_cast<float>(get_u32(in));
    return Tensor(std::move(shape), std::move(data));
}

void save_ltens(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_ltens(out, t);
}

Tensor load_ltens(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return read_ltens(in);
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

}  // namespace layerforge
