#pragma once

// Run configuration and the command implementations behind tools/layerforge.
// Every command stages its output in a sibling temp directory and renames it
// into place only after all artifacts are written.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "layerforge/checks.hpp"
#include "layerforge/diffusion.hpp"
#include "layerforge/harmonize.hpp"

namespace layerforge {

inline constexpr const char* kVersion = "0.1.0";

struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;  // T / beta_start / beta_end live at the top level of the JSON

    int ddim_steps = 50;
    int inversion_refine = 3;
    int T_G = 850;
    int T_H = 600;
    int T_H_prime = 400;
    LossWeights lambdas;

    double learning_rate = 1e-2;
    double alpha_learning_rate = 1.0;
    bool kv_only = false;
    bool train_alpha_head = true;
    bool shared_noise = false;
    std::uint64_t train_steps = 200;

    bool share_layers = true;
    bool inject_global = true;
    MaskMode mask_mode = MaskMode::global_only;  // decompose only; generation never masks
    bool mask_global_rows_only = false;

    std::size_t data_count = 8;
    std::size_t data_layers = 3;

    struct Paths {
        std::string data, checkpoint, prompts, image, run, edits;
    } paths;

    /// Rejects unknown keys at every level and wrongly typed values.
    static RunConfig from_json(const std::string& text);
    std::string to_json() const;  // effective config, re-parses to an equal config
    void validate() const;

    NoiseSchedule schedule() const { return model.schedule(); }
    IrhWindow window() const { return {T_H, T_H_prime}; }
    AttentionHooks sampling_hooks() const;  // unmasked
    AttentionHooks decompose_hooks() const;
    TrainOptions train_options() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

struct PromptSet {
    std::string background;
    std::vector<std::string> foregrounds;

    std::vector<std::string> all() const;
    static PromptSet load(const std::filesystem::path& path);
};

/// {"edits": [{"layer": i, "ops": [{"op": "move", "dx": 4, "dy": 0}, ...]}]};
/// layer 1..k names a foreground (0 is the background).
std::vector<std::vector<EditOp>> load_edits(const std::filesystem::path& path, std::size_t foregrounds);

/// `layers` counts the background.
void cmd_make_data(const RunConfig& config, std::size_t count, std::size_t layers, const std::filesystem::path& out);

/// Trains from a fresh init, or continues from `resume` (a checkpoint directory
/// written by this command). Output: checkpoint files, loss_log.tsv, config.json.
void cmd_train(const RunConfig& config, const std::filesystem::path& data_dir, std::uint64_t steps,
               const std::filesystem::path& out, const std::filesystem::path& resume = {});

void cmd_generate(const RunConfig& config, const std::filesystem::path& checkpoint,
                  const std::filesystem::path& prompts, const std::filesystem::path& out);

void cmd_decompose(const RunConfig& config, const std::filesystem::path& checkpoint,
                   const std::filesystem::path& image, const std::filesystem::path& prompts,
                   const std::filesystem::path& out);

void cmd_edit(const RunConfig& config, const std::filesystem::path& checkpoint, const std::filesystem::path& run_dir,
              const std::filesystem::path& edits, const std::filesystem::path& out);

std::vector<CheckResult> cmd_check(const std::string& suite, const FaultInjection& faults = {});

/// Loss-log line format shared by train and the golden comparison.
std::string format_step_log(const StepLog& log);

/// Upper bound from LAYERFORGE_THREADS (default 1); ValidationError when set
/// to anything but a positive integer.
std::size_t thread_cap();

/// Runs the command-line front end; returns the process exit code
/// (0 ok, 1 usage, 2 validation, 3 runtime).
int run_cli(int argc, char** argv);

}  // namespace layerforge
