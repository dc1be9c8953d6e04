#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "amalgam/blocknet.hpp"
#include "amalgam/bridge.hpp"
#include "amalgam/engine.hpp"
#include "amalgam/synthdata.hpp"

namespace amalgam {

// Container layout (all integers little-endian):
//   "AMLG" | u32 version | u8 kind | u32 spec_len | spec bytes | u32 tensor_count |
//   per tensor: u16 name_len | name | u8 dtype (1 = f64) | u8 rank | rank x u64 dims | f64 payload |
//   u64 FNV-1a checksum of every preceding byte
inline constexpr std::uint32_t kContainerVersion = 1;

enum class ContainerKind : std::uint8_t { net = 0, dataset = 1, amalgam_state = 2 };

struct Container {
    ContainerKind kind = ContainerKind::net;
    std::string spec_text;
    std::vector<NamedTensor> tensors;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(std::span<const std::uint8_t> bytes);

void save_container(const Container& c, const std::filesystem::path& path);
Container load_container(const std::filesystem::path& path);

std::string encode_spec(const BlockNetSpec& spec);
BlockNetSpec decode_spec(const std::string& text);

void save_net(const BlockNet& net, const std::filesystem::path& path);
BlockNet load_net(const std::filesystem::path& path);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// FA weights and lambda scales of an amalgamation run.
void save_amalgam_state(const AmalgamResult& result, const std::filesystem::path& path);
struct AmalgamState {
    std::vector<std::vector<TransferBridge>> bridges;
    std::vector<ScaleParam> scales;
};
AmalgamState load_amalgam_state(const std::filesystem::path& path);

enum class NetRole { source, component, target };
const char* to_string(NetRole role);
NetRole parse_role(const std::string& text);

struct RegistryEntry {
    std::string net_id;
    std::string relative_path;
    NetRole role = NetRole::source;
    TaskSet tasks;

    bool operator==(const RegistryEntry&) const = default;
};

// Directory of checkpoints plus `index.tsv`:
//   net_id <TAB> relative_path <TAB> role <TAB> comma-joined tasks
class ZooRegistry {
public:
    explicit ZooRegistry(std::filesystem::path dir);

    const std::filesystem::path& dir() const { return dir_; }
    std::filesystem::path index_path() const { return dir_ / "index.tsv"; }

    void register_net(const RegistryEntry& entry);
    RegistryEntry lookup(const std::string& net_id) const;
    std::vector<RegistryEntry> entries() const;
    std::vector<std::string> list_by_task(const std::string& task) const;
    // Throws if an entry's file is missing or fails its checksum.
    void verify() const;

    // Writes `<net_id>.amlg` into the zoo and registers it.
    RegistryEntry add_net(const std::string& net_id, const BlockNet& net, NetRole role);
    BlockNet load(const std::string& net_id) const;

private:
    std::filesystem::path dir_;
};

}  // namespace amalgam
