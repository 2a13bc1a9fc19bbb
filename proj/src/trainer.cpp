#include "embdistill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "embdistill/io_util.hpp"
#include "embdistill/rng.hpp"
#include "json.hpp"

namespace embd {

std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::triplet: return "triplet";
        case LossKind::proxynca: return "proxynca";
        case LossKind::normalized_softmax: return "normalized-softmax";
        case LossKind::group: return "group";
        case LossKind::distance_match: return "distance-match";
        case LossKind::cluster_match: return "cluster-match";
    }
    return "?";
}

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "triplet") return LossKind::triplet;
    if (s == "proxynca") return LossKind::proxynca;
    if (s == "normalized-softmax") return LossKind::normalized_softmax;
    if (s == "group") return LossKind::group;
    if (s == "distance-match") return LossKind::distance_match;
    if (s == "cluster-match") return LossKind::cluster_match;
    throw ConfigError("unknown loss kind: " + s);
}

std::string to_string(OptimizerKind k) {
    return k == OptimizerKind::sgd_momentum ? "sgd" : "adam";
}

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd_momentum;
    if (s == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer: " + s);
}

ProjectionHead make_head(std::size_t d_out, std::size_t d_in, bool bias, HeadInit init,
                         std::uint64_t seed) {
    if (d_out < 1 || d_in < 1) throw ConfigError("head: dimensions must be >= 1");
    ProjectionHead head;
    head.W = Matrix(d_out, d_in);
    if (init == HeadInit::identity) {
        if (d_out != d_in) throw ConfigError("identity init requires d_out == d_in");
        for (std::size_t i = 0; i < d_out; ++i) head.W(i, i) = 1.0f;
    } else {
        // Kaiming-uniform fan-in.
        Rng rng(mix_seed(seed, 0x68656164));
        const double bound = std::sqrt(6.0 / static_cast<double>(d_in));
        for (float& w : head.W.storage()) {
            w = static_cast<float>(rng.uniform(-bound, bound));
        }
    }
    if (bias) head.b.assign(d_out, 0.0f);
    head.bn = BatchNormState::identity(d_out);
    return head;
}

HeadForward head_forward_train(ProjectionHead& head, const Matrix& X) {
    HeadForward out;
    auto lin = linear_forward<float>(head.W, head.b, X);
    head.bn.mode = BnMode::train;
    auto bn = batchnorm_forward<float>(lin.Y, head.bn);
    out.emb = std::move(bn.Y);
    out.lin_cache = std::move(lin.cache);
    out.bn_cache = std::move(bn.cache);
    return out;
}

Matrix head_embed(const ProjectionHead& head, const Matrix& X) {
    const Matrix y = linear_apply<float>(head.W, head.b, X);
    BatchNormState bn = head.bn;  // eval is pure; work on a copy
    bn.mode = BnMode::eval;
    return batchnorm_forward<float>(y, bn).Y;
}

void TrainConfig::validate() const {
    if (lr < 0.0) throw ConfigError("train: lr must be >= 0");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    for (int m : lr_milestones) {
        if (m >= epochs) {
            throw ConfigError("train: lr milestone " + std::to_string(m) +
                              " must be < epochs = " + std::to_string(epochs));
        }
    }
    if (lr_decay <= 0.0) throw ConfigError("train: lr_decay must be > 0");
    if (target_dim < 1) throw ConfigError("train: target_dim must be >= 1");
    if (margin < 0.0) throw ConfigError("train: margin must be >= 0");
    if (tau <= 0.0) throw ConfigError("train: tau must be > 0");
    if (group_iterations < 0) throw ConfigError("train: group_iterations must be >= 0");
    if (!freeze_extractor) {
        throw ConfigError(
            "train: freeze_extractor=false requires the original feature extractor, "
            "which this toolkit does not train; only frozen features are supported");
    }
    batch.validate();
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
    int hits = 0;
    for (int m : cfg.lr_milestones) {
        if (m <= epoch) ++hits;
    }
    return cfg.lr * std::pow(cfg.lr_decay, hits);
}

void sgd_step(std::span<float> params, std::span<const float> grads, std::span<float> velocity,
              double lr, double momentum) {
    if (params.size() != grads.size() || params.size() != velocity.size()) {
        throw DimensionError("sgd_step: size mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double v = momentum * static_cast<double>(velocity[i]) + static_cast<double>(grads[i]);
        velocity[i] = static_cast<float>(v);
        params[i] = static_cast<float>(static_cast<double>(params[i]) - lr * v);
    }
}

void adam_step(std::span<float> params, std::span<const float> grads, AdamSlot& slot, double lr,
               double beta1, double beta2, double eps) {
    if (params.size() != grads.size()) throw DimensionError("adam_step: size mismatch");
    if (slot.m.size() != params.size()) {
        slot.m.assign(params.size(), 0.0f);
        slot.v.assign(params.size(), 0.0f);
        slot.t = 0;
    }
    slot.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(slot.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(slot.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        const double m = beta1 * static_cast<double>(slot.m[i]) + (1.0 - beta1) * g;
        const double v = beta2 * static_cast<double>(slot.v[i]) + (1.0 - beta2) * g * g;
        slot.m[i] = static_cast<float>(m);
        slot.v[i] = static_cast<float>(v);
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        params[i] =
            static_cast<float>(static_cast<double>(params[i]) - lr * m_hat / (std::sqrt(v_hat) + eps));
    }
}

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(m.row(rows[i]).data(), m.cols(), out.row(i).data());
    }
    return out;
}

std::vector<Label> gather_labels(const EmbeddingSet& set, const std::vector<std::size_t>& rows) {
    std::vector<Label> out;
    out.reserve(rows.size());
    for (std::size_t r : rows) {
        if (!set.items[r].clique) {
            throw SamplingError("batch contains an unlabeled item: " + set.items[r].id);
        }
        out.push_back(*set.items[r].clique);
    }
    return out;
}

ProxyBank make_proxy_bank(const EmbeddingSet& train_set, std::size_t dim, std::uint64_t seed) {
    ProxyBank bank;
    for (auto& [label, rows] : train_set.cliques()) bank.class_ids.push_back(label);
    bank.proxies = Matrix(bank.class_ids.size(), dim);
    Rng rng(mix_seed(seed, 0x70727879));
    for (float& v : bank.proxies.storage()) {
        v = static_cast<float>(0.01 * rng.normal());  // small init keeps tau=0.05 unsaturated
    }
    return bank;
}

CentroidBank make_centroid_bank(const EmbeddingSet& train_set, std::size_t student_dim,
                                std::uint64_t seed) {
    CentroidBank bank;
    const auto cliques = train_set.cliques();
    bank.centroids = Matrix(cliques.size(), train_set.dim());
    std::size_t row = 0;
    for (auto& [label, rows] : cliques) {
        bank.class_ids.push_back(label);
        for (std::size_t j = 0; j < train_set.dim(); ++j) {
            double acc = 0.0;
            for (std::size_t r : rows) acc += train_set.vectors(r, j);
            bank.centroids(row, j) = static_cast<float>(acc / static_cast<double>(rows.size()));
        }
        ++row;
    }
    bank.projection = Matrix(student_dim, train_set.dim());
    Rng rng(mix_seed(seed, 0x63656e74));
    const double bound = std::sqrt(6.0 / static_cast<double>(train_set.dim()));
    for (float& v : bank.projection.storage()) {
        v = static_cast<float>(rng.uniform(-bound, bound));
    }
    return bank;
}

namespace {

struct Params {
    // Fixed update order: W, b, gamma, beta, then proxies / projection.
    std::vector<std::span<float>> tensors;
    std::vector<OptSlot> slots;

    void add(std::span<float> t) {
        tensors.push_back(t);
        slots.emplace_back();
        slots.back().velocity.assign(t.size(), 0.0f);
    }
};

void apply_step(Params& params, const std::vector<std::vector<float>>& grads,
                const TrainConfig& cfg, double lr) {
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        if (grads[i].empty()) continue;
        if (cfg.optimizer == OptimizerKind::sgd_momentum) {
            sgd_step(params.tensors[i], grads[i], params.slots[i].velocity, lr, cfg.sgd_momentum);
        } else {
            adam_step(params.tensors[i], grads[i], params.slots[i].adam, lr, cfg.adam_beta1,
                      cfg.adam_beta2, cfg.adam_eps);
        }
    }
}

std::vector<float> flat(const Matrix& m) { return m.storage(); }

}  // namespace

TrainResult train(ProjectionHead head, const EmbeddingSet& train_set,
                  const EmbeddingSet& val_set, const TrainConfig& cfg) {
    cfg.validate();
    if (head.d_in() != train_set.dim()) {
        throw DimensionError("train: head d_in " + std::to_string(head.d_in()) +
                             " != feature dim " + std::to_string(train_set.dim()));
    }

    // Loss-specific banks.
    ProxyBank proxies;
    CentroidBank centroids;
    const bool uses_proxies =
        cfg.loss == LossKind::proxynca || cfg.loss == LossKind::normalized_softmax;
    const bool uses_centroids = cfg.loss == LossKind::cluster_match;
    if (uses_proxies) proxies = make_proxy_bank(train_set, head.d_out(), cfg.seed);
    if (uses_centroids) centroids = make_centroid_bank(train_set, head.d_out(), cfg.seed);

    Params params;
    params.add(std::span<float>(head.W.storage()));
    params.add(std::span<float>(head.b));
    params.add(std::span<float>(head.bn.gamma));
    params.add(std::span<float>(head.bn.beta));
    if (uses_proxies) params.add(std::span<float>(proxies.proxies.storage()));
    if (uses_centroids) params.add(std::span<float>(centroids.projection.storage()));

    const std::size_t n_batches =
        cfg.batches_per_epoch > 0 ? cfg.batches_per_epoch : batches_per_epoch(train_set, cfg.batch);

    BatchSpec spec = cfg.batch;
    spec.seed = mix_seed(cfg.seed, spec.seed);

    TrainResult result;
    auto snapshot = [&](int epoch, double val_map) {
        Checkpoint c;
        c.head = head;
        if (uses_proxies) c.proxies = proxies.proxies;
        if (uses_centroids) c.centroid_projection = centroids.projection;
        c.opt = params.slots;
        c.epoch = epoch;
        c.val_map = val_map;
        return c;
    };
    auto validate_now = [&]() {
        const Matrix emb = head_embed(head, val_set.vectors);
        return evaluate_vectors(emb, val_set.items, cfg.eval_metric);
    };

    if (cfg.epochs == 0) {
        const RetrievalReport rep = validate_now();
        result.best = snapshot(-1, rep.map);
        result.final = result.best;
        return result;
    }

    bool have_best = false;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < n_batches; ++b) {
            const auto idx = sample_batch(train_set, spec,
                                          {static_cast<std::uint64_t>(epoch), b});
            const Matrix features = gather_rows(train_set.vectors, idx);
            const std::vector<Label> labels = gather_labels(train_set, idx);

            HeadForward fwd;
            LossOutput loss;
            try {
                fwd = head_forward_train(head, features);
                switch (cfg.loss) {
                    case LossKind::triplet:
                        loss = triplet_loss(fwd.emb, labels, cfg.margin);
                        break;
                    case LossKind::proxynca:
                        loss = proxynca_loss(fwd.emb, labels, proxies);
                        break;
                    case LossKind::normalized_softmax:
                        loss = normalized_softmax_loss(fwd.emb, labels, proxies, cfg.tau);
                        break;
                    case LossKind::group:
                        loss = group_loss(fwd.emb, labels, cfg.group_iterations);
                        break;
                    case LossKind::distance_match:
                        loss = distance_matching_loss(fwd.emb, features);
                        break;
                    case LossKind::cluster_match:
                        loss = db_cluster_loss(fwd.emb, labels, centroids);
                        break;
                }
            } catch (const DegenerateInputError& e) {
                // Input features are validated up front, so degeneracy here
                // means the trainable state blew up.
                throw DivergenceError("training state degenerated at epoch " +
                                      std::to_string(epoch) + ", batch " + std::to_string(b) +
                                      " (lr " + std::to_string(lr) + "): " + e.what());
            } catch (const DegenerateBatchError& e) {
                throw DivergenceError("training state degenerated at epoch " +
                                      std::to_string(epoch) + ", batch " + std::to_string(b) +
                                      " (lr " + std::to_string(lr) + "): " + e.what());
            }
            if (!std::isfinite(loss.value)) {
                throw DivergenceError("loss " + to_string(cfg.loss) + " became non-finite at epoch " +
                                      std::to_string(epoch) + ", batch " + std::to_string(b) +
                                      " (lr " + std::to_string(lr) + ")");
            }
            loss_sum += loss.value;

            const auto bn_grads = batchnorm_backward<float>(loss.grad_embeddings, fwd.bn_cache);
            const auto lin_grads = linear_backward<float>(bn_grads.grad_X, fwd.lin_cache);

            std::vector<std::vector<float>> grads;
            grads.push_back(flat(lin_grads.grad_W));
            grads.push_back(lin_grads.grad_b);
            grads.push_back(bn_grads.grad_gamma);
            grads.push_back(bn_grads.grad_beta);
            if (uses_proxies) grads.push_back(flat(loss.grad_proxies));
            if (uses_centroids) grads.push_back(flat(loss.grad_projection));
            apply_step(params, grads, cfg, lr);
        }

        const RetrievalReport rep = validate_now();
        HistoryRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = loss_sum / static_cast<double>(n_batches);
        row.val_map = rep.map;
        row.val_mr1 = rep.mr1;
        result.history.push_back(row);

        if (!have_best || rep.map > result.best.val_map) {
            result.best = snapshot(epoch, rep.map);
            have_best = true;
        }
        if (epoch + 1 == cfg.epochs) result.final = snapshot(epoch, rep.map);
    }
    return result;
}

ReconfigureResult reconfigure(const EmbeddingSet& teacher_train, const EmbeddingSet& teacher_val,
                              const TrainConfig& cfg) {
    ProjectionHead head = make_head(cfg.target_dim, teacher_train.dim(), cfg.head_bias, cfg.init,
                                    mix_seed(cfg.seed, 0x7265636f));
    ReconfigureResult out;
    out.train = train(std::move(head), teacher_train, teacher_val, cfg);
    const Matrix emb = head_embed(out.train.best.head, teacher_val.vectors);
    out.distilled_val = make_embedding_set(teacher_val.items, emb);
    return out;
}

GridResult grid_search(const EmbeddingSet& train_set, const EmbeddingSet& val_set,
                       const TrainConfig& base, const std::vector<OptimizerKind>& optimizers,
                       const std::vector<double>& lrs, GridRunner runner) {
    if (optimizers.empty() || lrs.empty()) throw ConfigError("grid_search: empty grid");
    if (!runner) {
        runner = [&](const TrainConfig& cfg) {
            return reconfigure(train_set, val_set, cfg).train.best.val_map;
        };
    }

    std::vector<GridCell> cells;
    for (OptimizerKind opt : optimizers) {
        for (double lr : lrs) {
            TrainConfig cfg = base;
            cfg.optimizer = opt;
            cfg.lr = lr;
            GridCell cell;
            cell.optimizer = opt;
            cell.lr = lr;
            try {
                cell.val_map = runner(cfg);
            } catch (const DivergenceError& e) {
                cell.diverged = true;
                cell.diagnostic = e.what();
            }
            cells.push_back(std::move(cell));
        }
    }

    // Rank: best MAP first; ties prefer lower lr, then sgd.
    std::stable_sort(cells.begin(), cells.end(), [](const GridCell& a, const GridCell& b) {
        if (a.diverged != b.diverged) return !a.diverged;
        if (a.val_map != b.val_map) return a.val_map > b.val_map;
        if (a.lr != b.lr) return a.lr < b.lr;
        return a.optimizer == OptimizerKind::sgd_momentum && b.optimizer == OptimizerKind::adam;
    });

    if (cells.front().diverged) {
        std::string msg = "grid_search: every cell diverged:";
        for (const GridCell& c : cells) {
            msg += "\n  " + to_string(c.optimizer) + " lr=" + std::to_string(c.lr) + ": " +
                   c.diagnostic;
        }
        throw DivergenceError(msg);
    }

    GridResult out;
    out.best = base;
    out.best.optimizer = cells.front().optimizer;
    out.best.lr = cells.front().lr;
    out.leaderboard = std::move(cells);
    return out;
}

std::string history_to_csv(const std::vector<HistoryRow>& history) {
    std::ostringstream os;
    os << "epoch,lr,train_loss,val_map,val_mr1\n";
    for (const HistoryRow& r : history) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.lr, r.train_loss,
                      r.val_map, r.val_mr1);
        os << buf;
    }
    return os.str();
}

namespace {
constexpr char kMagic[4] = {'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_tensor(std::string& out, const std::vector<float>& v) {
    io::put_u64(out, v.size());
    for (float x : v) io::put_f32(out, x);
}

void put_matrix(std::string& out, const Matrix& m) {
    io::put_u64(out, m.rows());
    io::put_u64(out, m.cols());
    for (float x : m.storage()) io::put_f32(out, x);
}

std::vector<float> get_tensor(io::Reader& r) {
    const std::uint64_t n = r.u64("tensor length");
    std::vector<float> v(n);
    for (std::uint64_t i = 0; i < n; ++i) v[i] = r.f32("tensor data");
    return v;
}

Matrix get_matrix(io::Reader& r) {
    const std::uint64_t rows = r.u64("matrix rows");
    const std::uint64_t cols = r.u64("matrix cols");
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.storage()[i] = r.f32("matrix data");
    return m;
}
}  // namespace

void save_checkpoint(const Checkpoint& c, const TrainConfig& cfg, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    io::put_u32(out, kVersion);
    put_matrix(out, c.head.W);
    put_tensor(out, c.head.b);
    put_tensor(out, c.head.bn.gamma);
    put_tensor(out, c.head.bn.beta);
    put_tensor(out, c.head.bn.running_mean);
    put_tensor(out, c.head.bn.running_var);
    put_matrix(out, c.proxies);
    put_matrix(out, c.centroid_projection);
    io::put_u64(out, c.opt.size());
    for (const OptSlot& s : c.opt) {
        put_tensor(out, s.velocity);
        put_tensor(out, s.adam.m);
        put_tensor(out, s.adam.v);
        io::put_u64(out, static_cast<std::uint64_t>(s.adam.t));
    }

    nlohmann::json trailer;
    trailer["epoch"] = c.epoch;
    trailer["val_map"] = c.val_map;
    trailer["config"] = {{"loss", to_string(cfg.loss)},
                         {"optimizer", to_string(cfg.optimizer)},
                         {"lr", cfg.lr},
                         {"epochs", cfg.epochs},
                         {"lr_milestones", cfg.lr_milestones},
                         {"lr_decay", cfg.lr_decay},
                         {"margin", cfg.margin},
                         {"tau", cfg.tau},
                         {"group_iterations", cfg.group_iterations},
                         {"batch_p", cfg.batch.classes_per_batch},
                         {"batch_k", cfg.batch.samples_per_class},
                         {"seed", cfg.seed},
                         {"target_dim", cfg.target_dim},
                         {"head_bias", cfg.head_bias},
                         {"bn_momentum", c.head.bn.momentum},
                         {"bn_eps", c.head.bn.eps}};
    const std::string t = trailer.dump();
    out += t;
    io::put_u64(out, t.size());
    io::write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    const auto buf = io::read_file(path);
    io::Reader r(buf.data(), buf.size());
    r.require(4, "magic");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError("bad magic in " + path, 0);
    r.skip(4);
    if (r.u32("version") != kVersion) throw FormatError("unsupported checkpoint version", 4);

    Checkpoint c;
    c.head.W = get_matrix(r);
    c.head.b = get_tensor(r);
    c.head.bn.gamma = get_tensor(r);
    c.head.bn.beta = get_tensor(r);
    c.head.bn.running_mean = get_tensor(r);
    c.head.bn.running_var = get_tensor(r);
    c.proxies = get_matrix(r);
    c.centroid_projection = get_matrix(r);
    const std::uint64_t n_slots = r.u64("optimizer slots");
    for (std::uint64_t i = 0; i < n_slots; ++i) {
        OptSlot s;
        s.velocity = get_tensor(r);
        s.adam.m = get_tensor(r);
        s.adam.v = get_tensor(r);
        s.adam.t = static_cast<std::int64_t>(r.u64("adam t"));
        c.opt.push_back(std::move(s));
    }

    io::Reader tail(buf.data() + buf.size() - 8, 8);
    const std::uint64_t trailer_len = tail.u64("trailer length");
    const std::size_t trailer_start = r.offset();
    if (trailer_start + trailer_len + 8 != buf.size()) {
        throw FormatError("checkpoint trailer length inconsistent with file size", trailer_start);
    }
    const nlohmann::json trailer = nlohmann::json::parse(
        buf.begin() + static_cast<std::ptrdiff_t>(trailer_start),
        buf.begin() + static_cast<std::ptrdiff_t>(trailer_start + trailer_len));
    c.epoch = trailer.at("epoch").get<int>();
    c.val_map = trailer.at("val_map").get<double>();
    c.head.bn.momentum = trailer.at("config").at("bn_momentum").get<float>();
    c.head.bn.eps = trailer.at("config").at("bn_eps").get<float>();
    return c;
}

}  // namespace embd
