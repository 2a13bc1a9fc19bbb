#ifndef EMBDISTILL_TRAINER_HPP
#define EMBDISTILL_TRAINER_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "embdistill/dataset.hpp"
#include "embdistill/losses.hpp"
#include "embdistill/nn.hpp"
#include "embdistill/retrieval.hpp"
#include "embdistill/sampler.hpp"

namespace embd {

enum class LossKind { triplet, proxynca, normalized_softmax, group, distance_match, cluster_match };
enum class OptimizerKind { sgd_momentum, adam };
enum class HeadInit { kaiming, identity };

std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);
std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

// The student model: linear layer followed by batch normalization on top of
// frozen teacher features.
struct ProjectionHead {
    Matrix W;              // d_out x d_in
    std::vector<float> b;  // empty when the bias is disabled
    BatchNormState bn;

    std::size_t d_in() const { return W.cols(); }
    std::size_t d_out() const { return W.rows(); }
};

ProjectionHead make_head(std::size_t d_out, std::size_t d_in, bool bias, HeadInit init,
                         std::uint64_t seed);

struct HeadForward {
    Matrix emb;
    LinearCache<float> lin_cache;
    BatchNormCache<float> bn_cache;
};

// Train-mode forward (updates running stats).
HeadForward head_forward_train(ProjectionHead& head, const Matrix& X);

// Eval-mode forward; pure function of (head, X).
Matrix head_embed(const ProjectionHead& head, const Matrix& X);

struct TrainConfig {
    LossKind loss = LossKind::triplet;
    double margin = 1.0;        // triplet
    double tau = 0.05;          // normalized softmax
    int group_iterations = 3;   // group loss replicator refinements

    OptimizerKind optimizer = OptimizerKind::adam;
    double lr = 1e-3;
    int epochs = 70;
    std::vector<int> lr_milestones = {50, 60};
    double lr_decay = 0.1;
    double sgd_momentum = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    BatchSpec batch;
    std::size_t batches_per_epoch = 0;  // 0 = cover every eligible clique once
    std::uint64_t seed = 1;
    std::size_t target_dim = 16;
    bool head_bias = true;
    HeadInit init = HeadInit::kaiming;
    Metric eval_metric = Metric::squared_euclidean;
    // This artifact operates on precomputed penultimate features, so the
    // extractor is frozen for the whole run; the flag exists to make the
    // scope explicit and rejects the unsupported setting.
    bool freeze_extractor = true;

    void validate() const;
};

// lr0 * decay^(number of milestones <= epoch).
double lr_schedule(int epoch, const TrainConfig& cfg);

// v <- momentum * v + g;  p <- p - lr * v.
void sgd_step(std::span<float> params, std::span<const float> grads, std::span<float> velocity,
              double lr, double momentum);

struct AdamSlot {
    std::vector<float> m;
    std::vector<float> v;
    std::int64_t t = 0;
};

void adam_step(std::span<float> params, std::span<const float> grads, AdamSlot& slot, double lr,
               double beta1, double beta2, double eps);

// Per-tensor optimizer state, serialized with checkpoints.
struct OptSlot {
    std::vector<float> velocity;  // sgd
    AdamSlot adam;                // adam
};

struct Checkpoint {
    ProjectionHead head;
    Matrix proxies;              // proxy losses only
    Matrix centroid_projection;  // cluster matching only
    std::vector<OptSlot> opt;
    int epoch = -1;
    double val_map = 0.0;
};

struct HistoryRow {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_map = 0.0;
    double val_mr1 = 0.0;
};

struct TrainResult {
    Checkpoint best;   // best validation MAP (ties keep the earliest epoch)
    Checkpoint final;  // state after the last epoch
    std::vector<HistoryRow> history;
};

// Epochs x batches of forward -> loss -> backward -> optimizer -> schedule,
// with validation MAP computed at every epoch end; keeps the checkpoint with
// the best validation MAP. Bitwise reproducible given (seed, config, data).
TrainResult train(ProjectionHead head, const EmbeddingSet& train_set,
                  const EmbeddingSet& val_set, const TrainConfig& cfg);

struct ReconfigureResult {
    TrainResult train;
    EmbeddingSet distilled_val;  // best-checkpoint embeddings for the val set
};

// Fresh randomly-initialized head on top of the frozen teacher features.
ReconfigureResult reconfigure(const EmbeddingSet& teacher_train, const EmbeddingSet& teacher_val,
                              const TrainConfig& cfg);

struct GridCell {
    OptimizerKind optimizer = OptimizerKind::sgd_momentum;
    double lr = 0.0;
    double val_map = 0.0;
    bool diverged = false;
    std::string diagnostic;
};

struct GridResult {
    TrainConfig best;
    std::vector<GridCell> leaderboard;  // ranked, best first
};

// Scores one grid cell; returns best validation MAP, throws DivergenceError
// on failure. Injectable for testing.
using GridRunner = std::function<double(const TrainConfig&)>;

// One run per (optimizer, lr) cell, ranked by validation MAP with
// deterministic tie-break (lower lr first, sgd before adam).
GridResult grid_search(const EmbeddingSet& train_set, const EmbeddingSet& val_set,
                       const TrainConfig& base, const std::vector<OptimizerKind>& optimizers,
                       const std::vector<double>& lrs, GridRunner runner = nullptr);

std::string history_to_csv(const std::vector<HistoryRow>& history);

void save_checkpoint(const Checkpoint& c, const TrainConfig& cfg, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Row gather helpers shared by trainer and pruning.
Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows);
std::vector<Label> gather_labels(const EmbeddingSet& set, const std::vector<std::size_t>& rows);

// Banks built from the full training set.
ProxyBank make_proxy_bank(const EmbeddingSet& train_set, std::size_t dim, std::uint64_t seed);
CentroidBank make_centroid_bank(const EmbeddingSet& train_set, std::size_t student_dim,
                                std::uint64_t seed);

}  // namespace embd

#endif
