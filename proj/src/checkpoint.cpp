// SPDX-License-Identifier: Apache-2.0
#include "ovd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "ovd/error.hpp"
#include "ovd/rng.hpp"

namespace ovd {

namespace {

constexpr const char* kFormat = "ovd-checkpoint-v1";

void put_le(std::string& out, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_le(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

std::filesystem::path buffer_path(const std::filesystem::path& manifest) {
    std::filesystem::path p = manifest;
    p.replace_extension(".bin");
    return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& manifest, std::span<const NamedTensor> tensors,
                     const nlohmann::json& meta) {
    nlohmann::json entries = nlohmann::json::array();
    std::string buffer;
    for (const auto& [name, t] : tensors) {
        entries.push_back({{"name", name},
                           {"shape", t.shape()},
                           {"offset", buffer.size()},
                           {"count", t.numel()}});
        for (double v : t.data()) put_le(buffer, v);
    }
    const auto bin = buffer_path(manifest);
    nlohmann::json doc = {{"format", kFormat},
                          {"dtype", "float64"},
                          {"endianness", "little"},
                          {"buffer", bin.filename().string()},
                          {"bytes", buffer.size()},
                          {"meta", meta},
                          {"tensors", entries}};
    std::ofstream mf(manifest, std::ios::binary);
    require(static_cast<bool>(mf), ErrorKind::io, "cannot write " + manifest.string());
    mf << doc.dump(2) << '\n';
    std::ofstream bf(bin, std::ios::binary);
    require(static_cast<bool>(bf), ErrorKind::io, "cannot write " + bin.string());
    bf.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
    std::ifstream mf(manifest, std::ios::binary);
    require(static_cast<bool>(mf), ErrorKind::io, "cannot read " + manifest.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, manifest.string() + ": " + e.what());
    }
    require(doc.value("format", "") == kFormat, ErrorKind::parse,
            manifest.string() + ": unknown checkpoint format");
    const auto bin = manifest.parent_path() / doc.at("buffer").get<std::string>();
    std::ifstream bf(bin, std::ios::binary);
    require(static_cast<bool>(bf), ErrorKind::io, "cannot read " + bin.string());
    const std::string raw((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
    require(raw.size() == doc.at("bytes").get<std::size_t>(), ErrorKind::parse,
            bin.string() + ": buffer size does not match manifest");

    Checkpoint ck;
    ck.meta = doc.value("meta", nlohmann::json::object());
    for (const auto& e : doc.at("tensors")) {
        const auto shape = e.at("shape").get<Shape>();
        const auto offset = e.at("offset").get<std::size_t>();
        const auto count = e.at("count").get<std::size_t>();
        require(shape_numel(shape) == count && offset + 8 * count <= raw.size(),
                ErrorKind::parse, "tensor " + e.at("name").get<std::string>() + " out of bounds");
        std::vector<double> values(count);
        const auto* p = reinterpret_cast<const unsigned char*>(raw.data()) + offset;
        for (std::size_t i = 0; i < count; ++i) values[i] = get_le(p + 8 * i);
        ck.tensors.push_back({e.at("name").get<std::string>(), Tensor::from(shape, std::move(values))});
    }
    return ck;
}

void assign_parameters(ParameterSet& target, std::span<const NamedTensor> source) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : source) by_name[name] = &t;
    for (auto& [name, t] : target) {
        auto it = by_name.find(name);
        require(it != by_name.end(), ErrorKind::parse, "checkpoint is missing tensor " + name);
        require(it->second->shape() == t.shape(), ErrorKind::parse,
                "checkpoint tensor " + name + " has a different shape");
        auto dst = t.mutable_data();
        std::copy(it->second->data().begin(), it->second->data().end(), dst.begin());
    }
}

std::uint64_t parameter_checksum(std::span<const NamedTensor> tensors) {
    std::uint64_t h = fnv1a("");
    for (const auto& [name, t] : tensors) {
        h = fnv1a(name, h);
        for (std::size_t d : t.shape()) h = fnv1a(std::to_string(d) + ",", h);
        for (double v : t.data()) {
            char bytes[8];
            std::memcpy(bytes, &v, 8);
            h = fnv1a(std::string_view(bytes, 8), h);
        }
    }
    return h;
}

}  // namespace ovd
