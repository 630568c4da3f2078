#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "emolora/emodata.hpp"
#include "emolora/trainer.hpp"
#include "emolora/ttsmodel.hpp"

namespace emolora {

// Everything a command needs besides its flags. Loaded from a `key = value`
// file; keys not present keep their defaults.
struct LabConfig {
    ModelConfig model;
    std::uint64_t seed = 1;          // base init and every training run
    std::uint64_t teacher_seed = 1001;
    CorpusOptions teacher{200, 3, 8, 99};
    CorpusOptions corpus;
    TrainConfig train;

    void validate() const;
    bool operator==(const LabConfig&) const = default;
};

// Parses config text. Blank lines and '#' comments are ignored; unknown or
// repeated keys and malformed values raise ConfigError naming the line.
LabConfig parse_config(const std::string& text);
// Throws InputError (with the path) when the file cannot be read.
LabConfig load_config(const std::filesystem::path& path);
// Every key with its resolved value, in canonical order.
std::vector<std::pair<std::string, std::string>> config_entries(const LabConfig& cfg);
std::string format_config(const LabConfig& cfg);

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitTraining = 3;
inline constexpr int kExitIncompatible = 4;

// Maps an in-flight exception to an exit code.
int exit_code_for(const std::exception& e);

// Runs one command; args excludes the program name. Never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace emolora
