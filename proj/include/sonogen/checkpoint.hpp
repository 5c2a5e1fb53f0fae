#pragma once

// Versioned binary checkpoint. Layout (all integers little-endian):
//   magic "WBVL" | version u32 | config text (u32 length + UTF-8 bytes) |
//   tensor records until 4 bytes remain | CRC32 of all preceding bytes
// Tensor record: u32 name length | name bytes | u8 rank | u64 per dim | f32
// payload. Loading verifies the CRC and rejects unknown versions and
// duplicate tensor names; a save/load/save cycle is bit-identical.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "sonogen/error.hpp"
#include "sonogen/tensor.hpp"

namespace sonogen {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::uint32_t crc32(const unsigned char* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::vector<unsigned char>& b, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(b, bits);
}

struct ByteReader {
    const std::vector<unsigned char>& bytes;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > bytes.size())
            throw ParseError("checkpoint: truncated " + std::string(what) + " at byte offset " +
                             std::to_string(pos));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    unsigned char u8(const char* what) {
        need(1, what);
        return bytes[pos++];
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace detail

struct CheckpointData {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;  // insertion order preserved

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

inline std::vector<unsigned char> checkpoint_bytes(const CheckpointData& ckpt) {
    std::vector<unsigned char> b;
    b.push_back('W');
    b.push_back('B');
    b.push_back('V');
    b.push_back('L');
    detail::put_u32(b, kCheckpointVersion);
    detail::put_u32(b, static_cast<std::uint32_t>(ckpt.config_text.size()));
    b.insert(b.end(), ckpt.config_text.begin(), ckpt.config_text.end());
    for (const auto& [name, tensor] : ckpt.tensors) {
        detail::put_u32(b, static_cast<std::uint32_t>(name.size()));
        b.insert(b.end(), name.begin(), name.end());
        const auto& shape = tensor.shape();
        if (shape.size() > 255) throw ContractError("checkpoint: tensor rank exceeds 255");
        b.push_back(static_cast<unsigned char>(shape.size()));
        for (int d : shape) detail::put_u64(b, static_cast<std::uint64_t>(d));
        for (float v : tensor.values()) detail::put_f32(b, v);
    }
    detail::put_u32(b, detail::crc32(b.data(), b.size()));
    return b;
}

inline CheckpointData parse_checkpoint(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 4 + 4 + 4 + 4)
        throw ParseError("checkpoint: file shorter than the fixed header");
    if (bytes[0] != 'W' || bytes[1] != 'B' || bytes[2] != 'V' || bytes[3] != 'L')
        throw ParseError("checkpoint: bad magic (expected WBVL)");

    const std::size_t body_len = bytes.size() - 4;
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i)
        stored_crc |= static_cast<std::uint32_t>(bytes[body_len + i]) << (8 * i);
    if (detail::crc32(bytes.data(), body_len) != stored_crc)
        throw IntegrityError("checkpoint: CRC32 mismatch");

    detail::ByteReader r{bytes};
    r.pos = 4;
    const std::uint32_t version = r.u32("version");
    if (version > kCheckpointVersion)
        throw UnsupportedFormatError("checkpoint: version " + std::to_string(version) +
                                     " newer than supported " +
                                     std::to_string(kCheckpointVersion));

    CheckpointData out;
    const std::uint32_t cfg_len = r.u32("config length");
    out.config_text = r.str(cfg_len, "config text");

    while (r.pos < body_len) {
        const std::uint32_t name_len = r.u32("tensor name length");
        const std::string name = r.str(name_len, "tensor name");
        if (out.find(name))
            throw ParseError("checkpoint: duplicate tensor name '" + name + "'");
        const int rank = r.u8("tensor rank");
        Shape shape;
        std::size_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            const std::uint64_t dim = r.u64("tensor dim");
            if (dim == 0 || dim > (1u << 28))
                throw ParseError("checkpoint: implausible dimension " + std::to_string(dim) +
                                 " in tensor '" + name + "'");
            shape.push_back(static_cast<int>(dim));
            numel *= dim;
        }
        r.need(numel * 4, "tensor payload");
        std::vector<float> data(numel);
        for (std::size_t i = 0; i < numel; ++i) data[i] = r.f32("tensor payload");
        out.tensors.emplace_back(name, Tensor::from(std::move(shape), std::move(data)));
    }
    return out;
}

inline void save_checkpoint(const CheckpointData& ckpt, const std::string& path) {
    const auto bytes = checkpoint_bytes(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("checkpoint write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

}  // namespace sonogen
