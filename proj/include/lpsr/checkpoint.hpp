#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpsr/autograd.hpp"

// Tensor archive layout (all integers little-endian):
//   magic "LPSRCKPT" (8 bytes), u32 version, u32 entry count, then per entry:
//   u32 name length, name bytes (UTF-8), u8 dtype (0 = f32, 1 = f64),
//   u32 rank, rank x i64 dims, row-major element data.
// Architecture hyperparameters and counters live in a JSON sidecar at
// "<archive path>.json".

namespace lpsr {

inline constexpr std::uint32_t kArchiveVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct ArchiveEntry {
    std::string name;
    DType dtype = DType::F64;
    Shape shape;
    std::vector<unsigned char> bytes;
};

template <typename Scalar>
ArchiveEntry make_entry(const std::string& name, const Tensor<Scalar>& t);

// Converts between f32/f64 when the stored dtype differs from Scalar.
template <typename Scalar>
Tensor<Scalar> entry_tensor(const ArchiveEntry& e);

void write_archive(const std::filesystem::path& path, const std::vector<ArchiveEntry>& entries);
std::vector<ArchiveEntry> read_archive(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& archive);
void write_sidecar(const std::filesystem::path& archive, const nlohmann::json& meta);
nlohmann::json read_sidecar(const std::filesystem::path& archive);

// Appends every tensor of a parameter set (values only) under prefix + name.
template <typename Scalar>
void append_params(std::vector<ArchiveEntry>& out, const ParamSet<Scalar>& ps, const std::string& prefix = "");

// Restores values by name; every parameter of ps must be present with a matching shape.
template <typename Scalar>
void restore_params(const std::vector<ArchiveEntry>& entries, ParamSet<Scalar>& ps, const std::string& prefix = "");

// Single-component checkpoint: archive of ps plus a sidecar {component, config}.
template <typename Scalar>
void save_component(const std::filesystem::path& path, const ParamSet<Scalar>& ps, const std::string& component,
                    const nlohmann::json& config);

// Loads into ps and returns the sidecar; throws IoError if the component tag differs.
template <typename Scalar>
nlohmann::json load_component(const std::filesystem::path& path, ParamSet<Scalar>& ps, const std::string& component);

}  // namespace lpsr
