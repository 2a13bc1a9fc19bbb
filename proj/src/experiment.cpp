#include "embdistill/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "embdistill/io_util.hpp"
#include "embdistill/pruning.hpp"
#include "embdistill/reduction.hpp"
#include "embdistill/rng.hpp"
#include "embdistill/synth.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace embd {

std::string to_string(Method m) {
    switch (m) {
        case Method::pca: return "pca";
        case Method::ica: return "ica";
        case Method::grp: return "grp";
        case Method::prune: return "prune";
        case Method::distance_match: return "distance-match";
        case Method::cluster_match: return "cluster-match";
        case Method::reconfigure: return "reconfigure";
        case Method::baseline: return "baseline";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    if (s == "pca") return Method::pca;
    if (s == "ica") return Method::ica;
    if (s == "grp") return Method::grp;
    if (s == "prune") return Method::prune;
    if (s == "distance-match") return Method::distance_match;
    if (s == "cluster-match") return Method::cluster_match;
    if (s == "reconfigure") return Method::reconfigure;
    if (s == "baseline") return Method::baseline;
    throw ConfigError("unknown method: " + s);
}

std::string resolve_data_path(const std::string& path) {
    if (path.empty() || fs::path(path).is_absolute()) return path;
    const char* base = std::getenv("EMBDISTILL_DATA_DIR");
    if (!base || !*base) return path;
    return (fs::path(base) / path).string();
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        std::size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        const std::string part = trim(s.substr(pos, comma - pos));
        if (!part.empty()) out.push_back(part);
        pos = comma + 1;
    }
    return out;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("expected a boolean, got '" + v + "'");
}

}  // namespace

ExperimentConfig ExperimentConfig::parse_text(const std::string& text) {
    ExperimentConfig cfg;
    std::vector<std::string> problems;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            problems.push_back("line " + std::to_string(line_no) + ": expected key = value");
            continue;
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "method") {
                cfg.method = method_from_string(value);
            } else if (key == "loss") {
                cfg.loss = loss_kind_from_string(value);
            } else if (key == "dims") {
                cfg.dims.clear();
                for (const std::string& p : split_list(value)) {
                    cfg.dims.push_back(static_cast<std::size_t>(std::stoull(p)));
                }
            } else if (key == "train") {
                cfg.train_path = value;
            } else if (key == "val") {
                cfg.val_path = value;
            } else if (key == "manifest") {
                cfg.manifest_path = value;
            } else if (key == "out") {
                cfg.out_dir = value;
            } else if (key == "seed") {
                cfg.seed = std::stoull(value);
            } else if (key == "epochs") {
                cfg.epochs = std::stoi(value);
            } else if (key == "optimizer") {
                cfg.optimizer = optimizer_from_string(value);
            } else if (key == "lr") {
                cfg.lr = std::stod(value);
            } else if (key == "lr_milestones") {
                cfg.lr_milestones.clear();
                for (const std::string& p : split_list(value)) {
                    cfg.lr_milestones.push_back(std::stoi(p));
                }
                cfg.milestones_explicit = true;
            } else if (key == "lr_decay") {
                cfg.lr_decay = std::stod(value);
            } else if (key == "batch_p") {
                cfg.batch_p = std::stoull(value);
            } else if (key == "batch_k") {
                cfg.batch_k = std::stoull(value);
            } else if (key == "batches_per_epoch") {
                cfg.batches_per_epoch = std::stoull(value);
            } else if (key == "margin") {
                cfg.margin = std::stod(value);
            } else if (key == "tau") {
                cfg.tau = std::stod(value);
            } else if (key == "group_iterations") {
                cfg.group_iterations = std::stoi(value);
            } else if (key == "head_bias") {
                cfg.head_bias = parse_bool(value);
            } else if (key == "eval_metric") {
                cfg.eval_metric = metric_from_string(value);
            } else if (key == "freeze_extractor") {
                cfg.freeze_extractor = parse_bool(value);
            } else if (key == "ica_max_iter") {
                cfg.ica_max_iter = std::stoull(value);
            } else if (key == "ica_tol") {
                cfg.ica_tol = std::stod(value);
            } else if (key == "prune_initial_dim") {
                cfg.prune_initial_dim = std::stoull(value);
            } else if (key == "prune_retrain_epochs") {
                cfg.prune_retrain_epochs = std::stoi(value);
            } else if (key == "prune_early_stop_delta") {
                cfg.prune_early_stop_delta = std::stod(value);
            } else if (key == "prune_max_iterations") {
                cfg.prune_max_iterations = std::stoi(value);
            } else {
                problems.push_back("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
            }
        } catch (const std::exception& e) {
            problems.push_back("line " + std::to_string(line_no) + " (" + key + "): " + e.what());
        }
    }
    if (!problems.empty()) {
        std::string msg = "config parse errors:";
        for (const std::string& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
    // Default milestones only apply when they fit the epoch budget.
    if (!cfg.milestones_explicit) {
        std::vector<int> kept;
        for (int m : cfg.lr_milestones) {
            if (m < cfg.epochs) kept.push_back(m);
        }
        cfg.lr_milestones = kept;
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::parse_file(const std::string& path) {
    const auto buf = io::read_file(path);
    return parse_text(std::string(buf.begin(), buf.end()));
}

std::vector<std::string> ExperimentConfig::validate() const {
    std::vector<std::string> v;
    const bool reduction = method == Method::pca || method == Method::ica || method == Method::grp;
    const bool metric_loss_method = method == Method::reconfigure || method == Method::baseline;

    if (reduction && loss) {
        v.push_back("method '" + to_string(method) + "' does not take a loss");
    }
    if (method == Method::distance_match && loss && *loss != LossKind::distance_match) {
        v.push_back("method 'distance-match' implies loss 'distance-match'");
    }
    if (method == Method::cluster_match && loss && *loss != LossKind::cluster_match) {
        v.push_back("method 'cluster-match' implies loss 'cluster-match'");
    }
    if (metric_loss_method) {
        if (!loss) {
            v.push_back("method '" + to_string(method) + "' requires a loss");
        } else if (*loss == LossKind::distance_match || *loss == LossKind::cluster_match) {
            v.push_back("method '" + to_string(method) +
                        "' requires a metric-learning loss (triplet, proxynca, "
                        "normalized-softmax, group)");
        }
    }
    if (method == Method::prune && loss &&
        (*loss == LossKind::distance_match || *loss == LossKind::cluster_match)) {
        v.push_back("prune retraining requires a metric-learning loss");
    }

    if (method == Method::prune) {
        if (!dims.empty()) v.push_back("prune derives its dims from prune_initial_dim; drop 'dims'");
        if (prune_initial_dim < 2) v.push_back("prune_initial_dim must be >= 2");
        if (prune_early_stop_delta < 0) v.push_back("prune_early_stop_delta must be >= 0");
        if (prune_max_iterations < 1) v.push_back("prune_max_iterations must be >= 1");
    } else {
        if (dims.empty()) v.push_back("'dims' is required");
        for (std::size_t d : dims) {
            if (d < 1) v.push_back("dims entries must be >= 1");
        }
    }

    if (manifest_path.empty() && (train_path.empty() || val_path.empty())) {
        v.push_back("either 'manifest' or both 'train' and 'val' must be set");
    }
    if (out_dir.empty()) v.push_back("'out' is required");

    if (lr < 0) v.push_back("lr must be >= 0");
    if (epochs < 0) v.push_back("epochs must be >= 0");
    for (int m : lr_milestones) {
        if (m >= epochs) {
            v.push_back("lr milestone " + std::to_string(m) + " must be < epochs (" +
                        std::to_string(epochs) + ")");
        }
    }
    if (lr_decay <= 0) v.push_back("lr_decay must be > 0");
    if (batch_p < 2) v.push_back("batch_p must be >= 2");
    if (batch_k < 2) v.push_back("batch_k must be >= 2");
    if (margin < 0) v.push_back("margin must be >= 0");
    if (tau <= 0) v.push_back("tau must be > 0");
    if (group_iterations < 0) v.push_back("group_iterations must be >= 0");
    if (ica_max_iter < 1) v.push_back("ica_max_iter must be >= 1");
    if (ica_tol <= 0) v.push_back("ica_tol must be > 0");
    if (!freeze_extractor) {
        v.push_back("freeze_extractor = false is not supported: this toolkit trains on "
                    "precomputed features with the extractor frozen");
    }
    return v;
}

std::string ExperimentConfig::resolved_text() const {
    std::ostringstream os;
    os << "method = " << to_string(method) << "\n";
    if (loss) os << "loss = " << to_string(*loss) << "\n";
    if (!dims.empty()) {
        os << "dims = ";
        for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? ", " : "") << dims[i];
        os << "\n";
    }
    if (!manifest_path.empty()) os << "manifest = " << manifest_path << "\n";
    if (!train_path.empty()) os << "train = " << train_path << "\n";
    if (!val_path.empty()) os << "val = " << val_path << "\n";
    os << "seed = " << seed << "\n";
    os << "epochs = " << epochs << "\n";
    os << "optimizer = " << to_string(optimizer) << "\n";
    os << "lr = " << lr << "\n";
    os << "lr_milestones = ";
    for (std::size_t i = 0; i < lr_milestones.size(); ++i) os << (i ? ", " : "") << lr_milestones[i];
    os << "\n";
    os << "lr_decay = " << lr_decay << "\n";
    os << "batch_p = " << batch_p << "\n";
    os << "batch_k = " << batch_k << "\n";
    os << "batches_per_epoch = " << batches_per_epoch << "\n";
    os << "margin = " << margin << "\n";
    os << "tau = " << tau << "\n";
    os << "group_iterations = " << group_iterations << "\n";
    os << "head_bias = " << (head_bias ? "true" : "false") << "\n";
    os << "eval_metric = " << to_string(eval_metric) << "\n";
    os << "freeze_extractor = " << (freeze_extractor ? "true" : "false") << "\n";
    if (method == Method::ica) {
        os << "ica_max_iter = " << ica_max_iter << "\n";
        os << "ica_tol = " << ica_tol << "\n";
    }
    if (method == Method::prune) {
        os << "prune_initial_dim = " << prune_initial_dim << "\n";
        os << "prune_retrain_epochs = " << (prune_retrain_epochs < 0 ? epochs : prune_retrain_epochs)
           << "\n";
        os << "prune_early_stop_delta = " << prune_early_stop_delta << "\n";
        os << "prune_max_iterations = " << prune_max_iterations << "\n";
    }
    return os.str();
}

TrainConfig ExperimentConfig::train_config(std::size_t dim) const {
    TrainConfig t;
    if (loss) {
        t.loss = *loss;
    } else if (method == Method::distance_match) {
        t.loss = LossKind::distance_match;
    } else if (method == Method::cluster_match) {
        t.loss = LossKind::cluster_match;
    } else {
        t.loss = LossKind::triplet;
    }
    t.margin = margin;
    t.tau = tau;
    t.group_iterations = group_iterations;
    t.optimizer = optimizer;
    t.lr = lr;
    t.epochs = epochs;
    t.lr_milestones = lr_milestones;
    t.lr_decay = lr_decay;
    t.batch.classes_per_batch = batch_p;
    t.batch.samples_per_class = batch_k;
    t.batch.seed = seed;
    t.batches_per_epoch = batches_per_epoch;
    t.seed = seed;
    t.target_dim = dim;
    t.head_bias = head_bias;
    t.eval_metric = eval_metric;
    return t;
}

namespace {

// Owns <out>/.lock for the duration of a run.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (fs::exists(path_)) {
            throw StateError("output directory is locked by another run: " + path_.string());
        }
        std::ofstream f(path_);
        f << "locked\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
};

struct SummaryCell {
    std::size_t dim = 0;
    std::string status = "ok";  // "ok" | "n/a"
    double map = 0.0;
    double mr1 = 0.0;
};

void write_summary(const fs::path& out, const ExperimentConfig& cfg,
                   const std::vector<SummaryCell>& cells) {
    nlohmann::json j;
    j["method"] = to_string(cfg.method);
    std::string row_name = to_string(cfg.method);
    if (cfg.loss && (cfg.method == Method::reconfigure || cfg.method == Method::baseline ||
                     cfg.method == Method::prune)) {
        j["loss"] = to_string(*cfg.loss);
        row_name += "+" + to_string(*cfg.loss);
    }
    j["row"] = row_name;
    j["cells"] = nlohmann::json::array();
    for (const SummaryCell& c : cells) {
        j["cells"].push_back(
            {{"dim", c.dim}, {"status", c.status}, {"map", c.map}, {"mr1", c.mr1}});
    }
    io::write_file((out / "summary.json").string(), j.dump(2));

    std::ostringstream table;
    table << "method";
    for (const SummaryCell& c : cells) table << "\td=" << c.dim;
    table << "\n" << row_name;
    for (const SummaryCell& c : cells) {
        if (c.status == "ok") {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "\t%.4f", c.map);
            table << buf;
        } else {
            table << "\t" << c.status;
        }
    }
    table << "\n";
    io::write_file((out / "summary.txt").string(), table.str());
}

Matrix random_features_like(const Matrix& m, std::uint64_t seed) {
    Matrix out(m.rows(), m.cols());
    Rng rng(seed);
    for (float& v : out.storage()) v = static_cast<float>(rng.normal());
    return out;
}

}  // namespace

int run_experiment(const ExperimentConfig& cfg, bool force, std::string* message) {
    const std::vector<std::string> problems = cfg.validate();
    if (!problems.empty()) {
        std::string msg = "invalid experiment config:";
        for (const std::string& p : problems) msg += "\n  - " + p;
        if (message) *message = msg;
        return 1;
    }

    const fs::path out(cfg.out_dir);
    if (fs::exists(out / "summary.json") && !force) {
        if (message) {
            *message = "output directory already holds results: " + out.string() +
                       " (use --force to overwrite)";
        }
        return 1;
    }

    try {
        DirLock lock(out);
        io::write_file((out / "config.resolved.txt").string(), cfg.resolved_text());

        std::string train_path = cfg.train_path, val_path = cfg.val_path;
        if (!cfg.manifest_path.empty()) {
            const Manifest m = load_manifest(resolve_data_path(cfg.manifest_path));
            train_path = m.train_path;
            val_path = m.val_path;
        }
        const EmbeddingSet train_set = load_embeddings(resolve_data_path(train_path));
        const EmbeddingSet val_set = load_embeddings(resolve_data_path(val_path));

        std::vector<SummaryCell> cells;

        auto emit_eval = [&](const EmbeddingSet& distilled, std::size_t dim) {
            save_embeddings(distilled, (out / ("val_d" + std::to_string(dim) + ".embd")).string());
            const RetrievalReport rep = evaluate(distilled, cfg.eval_metric);
            io::write_file((out / ("report_d" + std::to_string(dim) + ".json")).string(),
                           report_to_json(rep));
            SummaryCell cell;
            cell.dim = dim;
            cell.map = rep.map;
            cell.mr1 = rep.mr1;
            cells.push_back(cell);
        };

        switch (cfg.method) {
            case Method::pca:
            case Method::ica:
            case Method::grp: {
                for (std::size_t k : cfg.dims) {
                    if (cfg.method == Method::pca) {
                        const Reducer r = fit_pca(train_set.vectors, k);
                        save_reducer(r, (out / ("reducer_d" + std::to_string(k) + ".rdc")).string());
                        emit_eval(make_embedding_set(val_set.items, transform(r, val_set.vectors)), k);
                    } else if (cfg.method == Method::grp) {
                        const Reducer r = fit_grp(train_set.dim(), k, cfg.seed);
                        save_reducer(r, (out / ("reducer_d" + std::to_string(k) + ".rdc")).string());
                        emit_eval(make_embedding_set(val_set.items, transform(r, val_set.vectors)), k);
                    } else {
                        const IcaOutcome o =
                            fit_ica(train_set.vectors, k, cfg.ica_max_iter, cfg.ica_tol, cfg.seed);
                        nlohmann::json diag = {{"converged", o.diag.converged},
                                               {"iterations", o.diag.iterations},
                                               {"final_delta", o.diag.final_delta}};
                        io::write_file((out / ("ica_diag_d" + std::to_string(k) + ".json")).string(),
                                       diag.dump(2));
                        if (o.reducer) {
                            save_reducer(*o.reducer,
                                         (out / ("reducer_d" + std::to_string(k) + ".rdc")).string());
                            emit_eval(make_embedding_set(val_set.items,
                                                         transform(*o.reducer, val_set.vectors)),
                                      k);
                        } else {
                            SummaryCell cell;
                            cell.dim = k;
                            cell.status = "n/a";  // non-convergence is reported, not hidden
                            cells.push_back(cell);
                        }
                    }
                }
                break;
            }
            case Method::reconfigure:
            case Method::baseline:
            case Method::distance_match:
            case Method::cluster_match: {
                EmbeddingSet train_feats = train_set;
                EmbeddingSet val_feats = val_set;
                if (cfg.method == Method::baseline) {
                    // Same-budget head on uninformative features.
                    train_feats.vectors =
                        random_features_like(train_set.vectors, mix_seed(cfg.seed, 0x62617365));
                    val_feats.vectors =
                        random_features_like(val_set.vectors, mix_seed(cfg.seed, 0x62617365 + 1));
                }
                for (std::size_t d : cfg.dims) {
                    const TrainConfig tc = cfg.train_config(d);
                    ReconfigureResult r = reconfigure(train_feats, val_feats, tc);
                    save_checkpoint(r.train.best, tc,
                                    (out / ("checkpoint_d" + std::to_string(d) + ".ckpt")).string());
                    io::write_file((out / ("history_d" + std::to_string(d) + ".csv")).string(),
                                   history_to_csv(r.train.history));
                    emit_eval(r.distilled_val, d);
                }
                break;
            }
            case Method::prune: {
                PruneConfig pc;
                pc.initial_dim = cfg.prune_initial_dim;
                pc.retrain = cfg.train_config(cfg.prune_initial_dim);
                if (cfg.prune_retrain_epochs >= 0) {
                    pc.retrain.epochs = cfg.prune_retrain_epochs;
                    if (!cfg.milestones_explicit) {
                        std::vector<int> kept;
                        for (int m : pc.retrain.lr_milestones) {
                            if (m < pc.retrain.epochs) kept.push_back(m);
                        }
                        pc.retrain.lr_milestones = kept;
                    }
                }
                pc.early_stop_delta = cfg.prune_early_stop_delta;
                pc.max_iterations = cfg.prune_max_iterations;
                pc.seed = cfg.seed;
                const PruneLoopResult r = run_prune_loop(train_set, val_set, pc);
                io::write_file((out / "prune_report.json").string(), prune_report_json(r.state));
                for (const PruneIteration& it : r.iterations) {
                    const Matrix emb = head_embed(it.best.head, val_set.vectors);
                    emit_eval(make_embedding_set(val_set.items, emb), it.kept_dims);
                }
                break;
            }
        }

        write_summary(out, cfg, cells);
        return 0;
    } catch (const std::exception& e) {
        if (message) *message = e.what();
        std::error_code ec;
        fs::create_directories(out, ec);
        std::ofstream diag(out / "diagnostic.txt");
        diag << e.what() << "\n";
        return 2;
    }
}

int run_experiment_file(const std::string& path, bool force, const std::string& out_override,
                        std::string* message) {
    ExperimentConfig cfg;
    try {
        cfg = ExperimentConfig::parse_file(path);
    } catch (const std::exception& e) {
        if (message) *message = e.what();
        return 1;
    }
    if (!out_override.empty()) cfg.out_dir = out_override;
    return run_experiment(cfg, force, message);
}

std::string merge_summaries(const std::vector<std::string>& run_dirs) {
    struct Row {
        std::string name;
        std::map<std::size_t, std::string> cells;
    };
    std::vector<Row> rows;
    std::vector<std::size_t> all_dims;
    for (const std::string& dir : run_dirs) {
        const auto buf = io::read_file((fs::path(dir) / "summary.json").string());
        const nlohmann::json j = nlohmann::json::parse(buf.begin(), buf.end());
        Row row;
        row.name = j.at("row").get<std::string>();
        for (const auto& c : j.at("cells")) {
            const auto dim = c.at("dim").get<std::size_t>();
            if (c.at("status").get<std::string>() == "ok") {
                char b[32];
                std::snprintf(b, sizeof(b), "%.4f", c.at("map").get<double>());
                row.cells[dim] = b;
            } else {
                row.cells[dim] = c.at("status").get<std::string>();
            }
            if (std::find(all_dims.begin(), all_dims.end(), dim) == all_dims.end()) {
                all_dims.push_back(dim);
            }
        }
        rows.push_back(std::move(row));
    }
    std::sort(all_dims.begin(), all_dims.end());

    std::ostringstream os;
    os << "method";
    for (std::size_t d : all_dims) os << "\td=" << d;
    os << "\n";
    for (const Row& row : rows) {
        os << row.name;
        for (std::size_t d : all_dims) {
            auto it = row.cells.find(d);
            os << "\t" << (it == row.cells.end() ? "-" : it->second);
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace embd
