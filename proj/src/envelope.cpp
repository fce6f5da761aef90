#include "blkprune/envelope.hpp"

#include "blkprune/tensor.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace blkprune {

namespace {

static_assert(std::endian::native == std::endian::little,
              "payload encoding assumes a little-endian host");

std::uint64_t element_bytes(const std::string& dtype) {
    if (dtype == "f32" || dtype == "u32") return 4;
    throw FormatError("unknown dtype '" + dtype + "'");
}

std::uint64_t element_count(const std::vector<std::int64_t>& shape) {
    std::uint64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw FormatError("negative extent in tensor shape");
        n *= static_cast<std::uint64_t>(d);
    }
    return n;
}

std::uint64_t expected_nbytes(const TensorEntry& e) {
    const std::uint64_t n = element_count(e.shape);
    if (e.dtype == "bits") return (n + 7) / 8;
    return n * element_bytes(e.dtype);
}

void put_u64(std::vector<std::byte>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
}

}  // namespace

EnvelopeWriter::EnvelopeWriter(std::string kind) {
    header_["format_version"] = kFormatVersion;
    header_["kind"] = std::move(kind);
}

void EnvelopeWriter::add_raw(const std::string& name, const std::string& dtype,
                             std::vector<std::int64_t> shape, const void* data,
                             std::size_t nbytes) {
    TensorEntry e{name, dtype, std::move(shape), payload_.size(), nbytes};
    if (expected_nbytes(e) != nbytes) {
        throw ContractError("envelope: tensor '" + name + "' byte length disagrees with shape");
    }
    const auto* p = static_cast<const std::byte*>(data);
    payload_.insert(payload_.end(), p, p + nbytes);
    entries_.push_back(std::move(e));
}

void EnvelopeWriter::add_f32(const std::string& name, std::vector<std::int64_t> shape,
                             std::span<const float> data) {
    add_raw(name, "f32", std::move(shape), data.data(), data.size_bytes());
}

void EnvelopeWriter::add_u32(const std::string& name, std::vector<std::int64_t> shape,
                             std::span<const std::uint32_t> data) {
    add_raw(name, "u32", std::move(shape), data.data(), data.size_bytes());
}

void EnvelopeWriter::add_bits(const std::string& name, std::vector<std::int64_t> shape,
                              std::span<const std::uint8_t> packed) {
    add_raw(name, "bits", std::move(shape), packed.data(), packed.size_bytes());
}

std::vector<std::byte> EnvelopeWriter::to_bytes() const {
    nlohmann::json h = header_;
    h["tensors"] = nlohmann::json::array();
    for (const auto& e : entries_) {
        h["tensors"].push_back({{"name", e.name},
                                {"dtype", e.dtype},
                                {"shape", e.shape},
                                {"offset", e.offset},
                                {"nbytes", e.nbytes}});
    }
    const std::string text = h.dump();
    std::vector<std::byte> out;
    out.reserve(16 + text.size() + payload_.size());
    for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
    put_u64(out, text.size());
    for (char c : text) out.push_back(static_cast<std::byte>(c));
    out.insert(out.end(), payload_.begin(), payload_.end());
    return out;
}

void EnvelopeWriter::write(const std::filesystem::path& path) const {
    write_file_bytes(path, to_bytes());
}

Envelope Envelope::parse(std::span<const std::byte> bytes, const std::string& expected_kind) {
    if (bytes.size() < 16) throw FormatError("file too short for envelope preamble");
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("bad magic bytes (expected BLKPRUN1)");
    }
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) {
        hlen |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(bytes[8 + i])) << (8 * i);
    }
    if (hlen > bytes.size() - 16) throw CorruptionError("truncated header");
    Envelope env;
    const char* hp = reinterpret_cast<const char*>(bytes.data() + 16);
    try {
        env.header_ = nlohmann::json::parse(hp, hp + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!env.header_.is_object() || env.header_.value("format_version", -1) != kFormatVersion) {
        throw FormatError("unsupported format version");
    }
    if (env.header_.value("kind", std::string()) != expected_kind) {
        throw FormatError("expected a '" + expected_kind + "' file, found '" +
                          env.header_.value("kind", std::string("?")) + "'");
    }
    const auto payload = bytes.subspan(16 + hlen);
    std::uint64_t total = 0;
    try {
        for (const auto& t : env.header_.at("tensors")) {
            TensorEntry e;
            e.name = t.at("name").get<std::string>();
            e.dtype = t.at("dtype").get<std::string>();
            e.shape = t.at("shape").get<std::vector<std::int64_t>>();
            e.offset = t.at("offset").get<std::uint64_t>();
            e.nbytes = t.at("nbytes").get<std::uint64_t>();
            env.entries_.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed tensor directory: ") + e.what());
    }
    for (const auto& e : env.entries_) {
        if (e.dtype != "bits") element_bytes(e.dtype);
        if (expected_nbytes(e) != e.nbytes) {
            throw CorruptionError("tensor '" + e.name + "': declared byte length " +
                                  std::to_string(e.nbytes) + " disagrees with its shape");
        }
        if (e.offset != total) {
            throw CorruptionError("tensor '" + e.name + "': unexpected payload offset");
        }
        total += e.nbytes;
    }
    if (total != payload.size()) {
        throw CorruptionError("payload is " + std::to_string(payload.size()) +
                              " bytes but the directory declares " + std::to_string(total));
    }
    env.payload_.assign(payload.begin(), payload.end());
    return env;
}

Envelope Envelope::read(const std::filesystem::path& path, const std::string& expected_kind) {
    const auto bytes = read_file_bytes(path);
    return parse(bytes, expected_kind);
}

const TensorEntry& Envelope::entry(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return e;
    }
    throw FormatError("missing tensor '" + name + "'");
}

std::span<const std::byte> Envelope::raw(const TensorEntry& e) const {
    return std::span<const std::byte>(payload_).subspan(e.offset, e.nbytes);
}

std::vector<float> Envelope::f32(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != "f32") throw FormatError("tensor '" + name + "' is not f32");
    std::vector<float> out(e.nbytes / 4);
    std::memcpy(out.data(), raw(e).data(), e.nbytes);
    return out;
}

std::vector<std::uint32_t> Envelope::u32(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != "u32") throw FormatError("tensor '" + name + "' is not u32");
    std::vector<std::uint32_t> out(e.nbytes / 4);
    std::memcpy(out.data(), raw(e).data(), e.nbytes);
    return out;
}

std::vector<std::uint8_t> Envelope::bits(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != "bits") throw FormatError("tensor '" + name + "' is not a bit mask");
    std::vector<std::uint8_t> out(e.nbytes);
    std::memcpy(out.data(), raw(e).data(), e.nbytes);
    return out;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::byte> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace blkprune
