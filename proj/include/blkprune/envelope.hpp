#pragma once

// Shared on-disk envelope for checkpoints, token files and mask blobs:
//
//   8 bytes   magic "BLKPRUN1"
//   8 bytes   header length H, unsigned little-endian
//   H bytes   UTF-8 JSON header ({"format_version", "kind", ..., "tensors": [...]})
//   payload   raw little-endian tensor data; each tensor directory entry carries
//             {name, dtype, shape, offset, nbytes} with offsets relative to the
//             payload start

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace blkprune {

inline constexpr char kMagic[8] = {'B', 'L', 'K', 'P', 'R', 'U', 'N', '1'};
inline constexpr int kFormatVersion = 1;

struct TensorEntry {
    std::string name;
    std::string dtype;  // "f32", "u32" or "bits"
    std::vector<std::int64_t> shape;
    std::uint64_t offset = 0;
    std::uint64_t nbytes = 0;
};

// Builds the payload and tensor directory incrementally.
class EnvelopeWriter {
  public:
    explicit EnvelopeWriter(std::string kind);

    nlohmann::json& header() { return header_; }

    void add_f32(const std::string& name, std::vector<std::int64_t> shape,
                 std::span<const float> data);
    void add_u32(const std::string& name, std::vector<std::int64_t> shape,
                 std::span<const std::uint32_t> data);
    // Row-major booleans packed LSB-first into bytes.
    void add_bits(const std::string& name, std::vector<std::int64_t> shape,
                  std::span<const std::uint8_t> packed);

    std::vector<std::byte> to_bytes() const;
    void write(const std::filesystem::path& path) const;

  private:
    void add_raw(const std::string& name, const std::string& dtype,
                 std::vector<std::int64_t> shape, const void* data, std::size_t nbytes);

    nlohmann::json header_;
    std::vector<TensorEntry> entries_;
    std::vector<std::byte> payload_;
};

class Envelope {
  public:
    // Parses and validates magic, version, kind and the tensor directory.
    static Envelope parse(std::span<const std::byte> bytes, const std::string& expected_kind);
    static Envelope read(const std::filesystem::path& path, const std::string& expected_kind);

    const nlohmann::json& header() const { return header_; }
    const std::vector<TensorEntry>& entries() const { return entries_; }
    const TensorEntry& entry(const std::string& name) const;

    std::vector<float> f32(const std::string& name) const;
    std::vector<std::uint32_t> u32(const std::string& name) const;
    std::vector<std::uint8_t> bits(const std::string& name) const;

  private:
    std::span<const std::byte> raw(const TensorEntry& e) const;

    nlohmann::json header_;
    std::vector<TensorEntry> entries_;
    std::vector<std::byte> payload_;
};

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace blkprune
