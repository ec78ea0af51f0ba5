#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pbnn/data.hpp"
#include "pbnn/orchestrator.hpp"

namespace pbnn {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Every field the config file accepts, with its default. Unknown keys are
// rejected with the offending path in the message.
nlohmann::ordered_json default_config();

// Parse + merge over defaults + validate. Throws ConfigError.
nlohmann::ordered_json load_config(const std::string& path);
nlohmann::ordered_json parse_config_text(const std::string& text,
                                         const std::string& origin);

// `--set a.b.c=value` override; value parsed as JSON when possible,
// otherwise taken as a string. Throws ConfigError on unknown paths.
void apply_override(nlohmann::ordered_json& config, const std::string& assignment);

struct RunSetup {
    ExperimentConfig config;
    Splits splits;
    nlohmann::ordered_json resolved;
};

// Loads/generates the dataset, splits it, and maps the document onto an
// ExperimentConfig. Dataset problems throw std::runtime_error; structural
// problems throw ConfigError.
RunSetup build_run(const nlohmann::ordered_json& resolved);

}  // namespace pbnn
