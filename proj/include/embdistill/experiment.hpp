#ifndef EMBDISTILL_EXPERIMENT_HPP
#define EMBDISTILL_EXPERIMENT_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "embdistill/retrieval.hpp"
#include "embdistill/trainer.hpp"

namespace embd {

enum class Method { pca, ica, grp, prune, distance_match, cluster_match, reconfigure, baseline };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

// Declarative experiment description, read from a plain key = value file.
struct ExperimentConfig {
    Method method = Method::reconfigure;
    std::optional<LossKind> loss;
    std::vector<std::size_t> dims;
    std::string train_path;
    std::string val_path;
    std::string manifest_path;
    std::string out_dir;

    std::uint64_t seed = 1;
    int epochs = 70;
    OptimizerKind optimizer = OptimizerKind::adam;
    double lr = 1e-3;
    std::vector<int> lr_milestones = {50, 60};
    bool milestones_explicit = false;
    double lr_decay = 0.1;
    std::size_t batch_p = 16;
    std::size_t batch_k = 4;
    std::size_t batches_per_epoch = 0;
    double margin = 1.0;
    double tau = 0.05;
    int group_iterations = 3;
    bool head_bias = true;
    Metric eval_metric = Metric::squared_euclidean;
    bool freeze_extractor = true;

    std::size_t ica_max_iter = 200;
    double ica_tol = 1e-4;

    std::size_t prune_initial_dim = 32;
    int prune_retrain_epochs = -1;  // -1 = use `epochs`
    double prune_early_stop_delta = 0.05;
    int prune_max_iterations = 16;

    static ExperimentConfig parse_text(const std::string& text);
    static ExperimentConfig parse_file(const std::string& path);

    // All violations, empty when valid. Never touches the filesystem.
    std::vector<std::string> validate() const;

    // Deterministic key = value dump of every resolved setting.
    std::string resolved_text() const;

    TrainConfig train_config(std::size_t dim) const;
};

// Executes the experiment: 0 on success, 1 on validation failure, 2 on
// runtime failure. Validation failures are reported before any data is read.
int run_experiment(const ExperimentConfig& cfg, bool force, std::string* message = nullptr);

int run_experiment_file(const std::string& path, bool force, const std::string& out_override = "",
                        std::string* message = nullptr);

// Merged Table-style comparison over several run directories (each must
// contain a summary.json).
std::string merge_summaries(const std::vector<std::string>& run_dirs);

// Resolve a data path against EMBDISTILL_DATA_DIR when relative.
std::string resolve_data_path(const std::string& path);

}  // namespace embd

#endif
