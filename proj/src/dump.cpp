// SPDX-License-Identifier: Apache-2.0

#include "slapo/dump.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace slapo {

namespace {

template <typename T>
void write_le(std::ostream& out, T v) {
    // Little-endian host assumed (x86/aarch64); bytes written in memory order.
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

// 'SLD1': dump format version header.
constexpr std::uint32_t kDumpMagic = 0x31444C53;

void write_tensor_dump(const std::string& path, const std::vector<TensorValue>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write tensor dump '" + path + "'");
    write_le<std::uint32_t>(out, kDumpMagic);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.spec.rank()));
        for (auto d : t.spec.shape) write_le<std::int64_t>(out, d);
        write_le<std::uint8_t>(out, t.spec.dtype == Dtype::F32 ? 0 : 1);
        if (t.spec.dtype == Dtype::F32) {
            for (double v : t.data) write_le<float>(out, static_cast<float>(v));
        } else {
            for (double v : t.data) write_le<double>(out, v);
        }
    }
}

std::vector<TensorValue> read_tensor_dump(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read tensor dump '" + path + "'");
    if (read_le<std::uint32_t>(in) != kDumpMagic)
        throw Error("'" + path + "' is not a slapo tensor dump (bad format header)");
    std::uint32_t count = read_le<std::uint32_t>(in);
    std::vector<TensorValue> tensors;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t rank = read_le<std::uint32_t>(in);
        TensorSpec spec;
        for (std::uint32_t d = 0; d < rank; ++d) spec.shape.push_back(read_le<std::int64_t>(in));
        spec.dtype = read_le<std::uint8_t>(in) == 0 ? Dtype::F32 : Dtype::F64;
        TensorValue t(spec);
        for (std::int64_t j = 0; j < t.size(); ++j) {
            t.data[j] = spec.dtype == Dtype::F32 ? static_cast<double>(read_le<float>(in))
                                                 : read_le<double>(in);
        }
        if (!in) throw Error("truncated tensor dump '" + path + "'");
        tensors.push_back(std::move(t));
    }
    return tensors;
}

std::string format_tensor_text(const TensorValue& t) {
    std::ostringstream oss;
    oss << "tensor " << t.spec.to_string() << " [";
    char buf[32];
    for (std::int64_t i = 0; i < t.size(); ++i) {
        if (i) oss << ", ";
        if (i == 16 && t.size() > 20) {
            oss << "... " << (t.size() - i) << " more";
            break;
        }
        std::snprintf(buf, sizeof(buf), "%.17g", t.data[i]);
        oss << buf;
    }
    oss << "]";
    return oss.str();
}

}  // namespace slapo
