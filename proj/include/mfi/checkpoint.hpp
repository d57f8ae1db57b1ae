#pragma once

// Binary checkpoint container, little-endian throughout:
//
//   magic        8 bytes  "MFICKPT\0"
//   version      u32
//   kind         str                      (str = u32 length + utf-8 bytes)
//   hyper        u32 count, (str key, str value) * count, keys sorted
//   log          u32 count, (str key, str value) * count, keys sorted
//   tensors      u32 count, then per tensor:
//                  str name, u32 rank, u64 extents[rank], f32 payload
//   digest       u64 FNV-1a over every preceding byte
//
// Loading checks magic, version, structure (bounds), digest, then kind.

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mfi/error.hpp"
#include "mfi/nn.hpp"
#include "mfi/tensor.hpp"

namespace mfi {

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
/// Hex digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::string_view kMagic{"MFICKPT\0", 8};

    std::string kind;
    std::map<std::string, std::string> hyper;
    std::map<std::string, std::string> log;
    std::vector<std::pair<std::string, Tensor>> tensors;

    /// Known kind tags: teacher, meanflow, meta, stage, hybrid.
    static const std::set<std::string>& known_kinds();

    std::vector<std::uint8_t> serialize() const;
    static Checkpoint parse(std::span<const std::uint8_t> bytes);

    /// Write to a sibling temporary, then rename over `path`.
    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);
    /// Load and require a specific kind.
    static Checkpoint load(const std::filesystem::path& path, std::string_view expected_kind);

    bool has(std::string_view name) const;
    const Tensor& tensor(std::string_view name) const;
    void add(std::string name, Tensor value);
    const std::string& hyper_value(const std::string& key) const;
};

/// Copy every parameter and buffer into a checkpoint tensor table.
void store_state(Checkpoint& ckpt, const nn::StateRefs& state);
/// Copy tensors back into a model. Every model tensor must be present with the
/// same shape; extra checkpoint entries are an error.
void restore_state(const nn::StateRefs& state, const Checkpoint& ckpt);

/// Content hash of a model's tensors (parameters and buffers), for freeze checks.
std::uint64_t state_hash(const nn::StateRefs& state);
/// Hash restricted to parameters whose names start with one of `prefixes`.
std::uint64_t state_hash(const nn::StateRefs& state, std::span<const std::string> prefixes);

}  // namespace mfi
