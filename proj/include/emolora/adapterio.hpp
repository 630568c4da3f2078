#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "emolora/lora.hpp"
#include "emolora/tensor.hpp"
#include "emolora/ttsmodel.hpp"

namespace emolora {

// ---------------------------------------------------------------------------
// EELA container
//
//   "EELA"            4 bytes magic
//   version           u16 (currently 1)
//   kind tag          4 bytes: "ADPT" | "BASE" | "CORP"
//   scheme id         1 ASCII byte ('-' when not applicable)
//   rank              u16
//   alpha             f32
//   name              u16 length + UTF-8 bytes
//   record count      u32
//   records           path (u16 length + UTF-8), kind u8, d_in u32, d_out u32,
//                     then payload A and payload B as little-endian f32
//   crc32             u32 over every preceding byte
//
// All integers are little-endian. Payload lengths are not stored; they are
// implied by the container kind, the header rank and the record kind (see
// payload_lengths). docs/FORMAT.md has the full table.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kFormatVersion = 1;

enum class ContainerKind { adapter, base, corpus };

enum class RecordKind : std::uint8_t { linear = 0, conv1d = 1, embedding = 2, tensor = 3 };

struct Record {
    std::string path;
    RecordKind kind = RecordKind::tensor;
    std::uint32_t d_in = 0;
    std::uint32_t d_out = 0;
    std::vector<float> a;
    std::vector<float> b;

    bool operator==(const Record&) const = default;
};

struct Container {
    ContainerKind kind = ContainerKind::adapter;
    char scheme = '-';
    std::uint16_t rank = 0;
    float alpha = 0.0f;
    std::string name;
    std::vector<Record> records;
};

std::pair<std::size_t, std::size_t> payload_lengths(ContainerKind kind, std::uint16_t rank, const Record& r);

std::string encode(const Container& c);
Container decode(std::string_view bytes);

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// The name field carries a label optionally followed by ";key=value" pairs.
struct NameField {
    std::string label;
    std::vector<std::pair<std::string, std::string>> meta;

    std::string encode() const;
    static NameField parse(std::string_view text);
    std::optional<std::string> get(std::string_view key) const;
};

// ---------------------------------------------------------------------------
// Adapter bundles
// ---------------------------------------------------------------------------

struct AdapterRecord {
    std::string path;
    LayerKind kind = LayerKind::linear;
    std::uint32_t d_in_eff = 0;
    std::uint32_t d_out_eff = 0;
    Tensor a; // [r_eff x d_in_eff]
    Tensor b; // [d_out_eff x r_eff]
};

struct AdapterBundle {
    std::string name; // emotion label
    char scheme = 'g';
    int rank = 0;
    float alpha = 0.0f;
    std::vector<AdapterRecord> records;
    std::uint32_t base_checksum = 0;

    std::size_t param_count() const;
};

bool bitwise_equal(const AdapterBundle& x, const AdapterBundle& y);

// Snapshots the adapters currently attached to `model`.
AdapterBundle extract_bundle(const ToyModel& model, std::string name, char scheme, int rank, float alpha);

// Attaches the bundle's factors layer by layer. The model must be
// adapter-free and its base checksum must match the bundle's.
void attach_bundle(ToyModel& model, const AdapterBundle& bundle);

Container to_container(const AdapterBundle& bundle);
AdapterBundle bundle_from_container(const Container& c);
void save_bundle(const AdapterBundle& bundle, const std::filesystem::path& path);
AdapterBundle load_bundle(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Base checkpoints
// ---------------------------------------------------------------------------

Container base_to_container(const ToyModel& model);
ToyModel base_from_container(const Container& c);
void save_base(const ToyModel& model, const std::filesystem::path& path);
ToyModel load_base(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Hot-swap registry
// ---------------------------------------------------------------------------

// Named bundles plus the one currently attached to the model it serves.
// Concurrent lookups are fine; swap() must have exclusive access to the
// model.
class AdapterRegistry {
public:
    void add(AdapterBundle bundle);
    bool contains(std::string_view name) const;
    const AdapterBundle& get(std::string_view name) const;
    std::vector<std::string> names() const;
    const std::optional<std::string>& attached() const { return attached_; }

    // Detaches whatever is attached (bit-exact restore of the base) and
    // attaches `name`, or leaves the pristine base when name is empty.
    void swap(ToyModel& model, std::optional<std::string> name);

private:
    std::map<std::string, AdapterBundle, std::less<>> bundles_;
    std::optional<std::string> attached_;
};

} // namespace emolora
