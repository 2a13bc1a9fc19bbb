#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "embdistill/experiment.hpp"
#include "embdistill/io_util.hpp"
#include "embdistill/synth.hpp"

namespace fs = std::filesystem;
using namespace embd;

namespace {

int fail(const std::string& msg, int code) {
    std::cerr << "error: " << msg << "\n";
    return code;
}

int run_config(ExperimentConfig cfg, bool force) {
    std::string msg;
    const int rc = run_experiment(cfg, force, &msg);
    if (rc != 0) return fail(msg, rc);
    std::cout << "wrote results to " << cfg.out_dir << "\n";
    const auto summary = fs::path(cfg.out_dir) / "summary.txt";
    if (fs::exists(summary)) {
        const auto buf = io::read_file(summary.string());
        std::cout << std::string(buf.begin(), buf.end());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"embedding distillation toolkit"};
    app.require_subcommand(1);

    // --- run ---------------------------------------------------------------
    std::string run_config_path, run_out_override;
    bool run_force = false;
    auto* cmd_run = app.add_subcommand("run", "execute an experiment config file");
    cmd_run->add_option("config", run_config_path, "experiment config file")->required();
    cmd_run->add_option("--out", run_out_override, "override the output directory");
    cmd_run->add_flag("--force", run_force, "overwrite existing results");

    // --- synth -------------------------------------------------------------
    std::string synth_out, synth_preset = "separable";
    SynthConfig synth_cfg;
    std::size_t ov_cliques = 0, ov_val_cliques = 0, ov_dim = 0, ov_noise_items = 0;
    std::size_t ov_size_min = 0, ov_size_max = 0, ov_val_size = 0;
    double ov_center = -1.0, ov_noise = -1.0;
    std::uint64_t synth_seed = 1;
    auto* cmd_synth = app.add_subcommand("synth", "generate a synthetic clique-structured dataset");
    cmd_synth->add_option("--out", synth_out, "output directory")->required();
    cmd_synth->add_option("--preset", synth_preset, "separable | paper-shape");
    cmd_synth->add_option("--seed", synth_seed, "random seed");
    cmd_synth->add_option("--cliques", ov_cliques, "train cliques");
    cmd_synth->add_option("--val-cliques", ov_val_cliques, "val cliques");
    cmd_synth->add_option("--dim", ov_dim, "teacher feature dimension");
    cmd_synth->add_option("--size-min", ov_size_min, "minimum clique size");
    cmd_synth->add_option("--size-max", ov_size_max, "maximum clique size");
    cmd_synth->add_option("--val-size", ov_val_size, "exact val clique size (0 = skewed)");
    cmd_synth->add_option("--center-scale", ov_center, "clique center spread");
    cmd_synth->add_option("--noise-scale", ov_noise, "per-item noise spread");
    cmd_synth->add_option("--noise-items", ov_noise_items, "noise items in the val split");

    // --- reduce ------------------------------------------------------------
    ExperimentConfig red;
    std::string red_method = "pca", red_dims;
    bool red_force = false;
    auto* cmd_reduce = app.add_subcommand("reduce", "fit an unsupervised reducer and evaluate");
    cmd_reduce->add_option("--method", red_method, "pca | ica | grp")->required();
    cmd_reduce->add_option("--dims", red_dims, "target dims, comma separated")->required();
    cmd_reduce->add_option("--train", red.train_path, "training embeddings")->required();
    cmd_reduce->add_option("--val", red.val_path, "evaluation embeddings")->required();
    cmd_reduce->add_option("--out", red.out_dir, "output directory")->required();
    cmd_reduce->add_option("--seed", red.seed, "random seed");
    cmd_reduce->add_option("--ica-max-iter", red.ica_max_iter, "FastICA iteration cap");
    cmd_reduce->add_option("--ica-tol", red.ica_tol, "FastICA convergence tolerance");
    cmd_reduce->add_flag("--force", red_force, "overwrite existing results");

    // --- train / distill ---------------------------------------------------
    ExperimentConfig tr;
    std::string tr_loss, tr_dims, tr_method = "reconfigure", tr_optimizer = "adam",
                tr_metric = "euclidean", tr_milestones;
    bool tr_force = false;
    auto* cmd_train = app.add_subcommand("train", "train a projection head with a metric loss");
    cmd_train->add_option("--loss", tr_loss, "triplet | proxynca | normalized-softmax | group")
        ->required();
    cmd_train->add_option("--method", tr_method, "reconfigure | baseline");
    auto* cmd_distill = app.add_subcommand("distill", "teacher-guided distillation");
    std::string di_method = "distance-match";
    cmd_distill->add_option("--method", di_method, "distance-match | cluster-match")->required();
    for (CLI::App* c : {cmd_train, cmd_distill}) {
        c->add_option("--dim,--dims", tr_dims, "target dims, comma separated")->required();
        c->add_option("--train", tr.train_path, "training features")->required();
        c->add_option("--val", tr.val_path, "validation features")->required();
        c->add_option("--out", tr.out_dir, "output directory")->required();
        c->add_option("--seed", tr.seed, "random seed");
        c->add_option("--epochs", tr.epochs, "training epochs");
        c->add_option("--optimizer", tr_optimizer, "sgd | adam");
        c->add_option("--lr", tr.lr, "initial learning rate");
        c->add_option("--lr-milestones", tr_milestones, "epochs where lr decays, comma separated");
        c->add_option("--lr-decay", tr.lr_decay, "lr decay factor");
        c->add_option("--batch-p", tr.batch_p, "classes per batch");
        c->add_option("--batch-k", tr.batch_k, "samples per class");
        c->add_option("--batches-per-epoch", tr.batches_per_epoch, "0 = cover all cliques");
        c->add_option("--margin", tr.margin, "triplet margin");
        c->add_option("--tau", tr.tau, "softmax temperature");
        c->add_option("--group-iterations", tr.group_iterations, "replicator refinements");
        c->add_option("--eval-metric", tr_metric, "euclidean | cosine");
        c->add_flag("--force", tr_force, "overwrite existing results");
    }

    // --- prune ---------------------------------------------------------------
    ExperimentConfig pr;
    std::string pr_loss = "triplet";
    bool pr_force = false;
    auto* cmd_prune = app.add_subcommand("prune", "iterative magnitude pruning with rewind");
    cmd_prune->add_option("--train", pr.train_path, "training features")->required();
    cmd_prune->add_option("--val", pr.val_path, "validation features")->required();
    cmd_prune->add_option("--out", pr.out_dir, "output directory")->required();
    cmd_prune->add_option("--initial-dim", pr.prune_initial_dim, "width before pruning");
    cmd_prune->add_option("--retrain-epochs", pr.prune_retrain_epochs, "budget per iteration");
    cmd_prune->add_option("--early-stop-delta", pr.prune_early_stop_delta,
                          "stop when val MAP drops this far below Iteration 0");
    cmd_prune->add_option("--max-iterations", pr.prune_max_iterations, "iteration cap");
    cmd_prune->add_option("--loss", pr_loss, "retraining loss");
    cmd_prune->add_option("--seed", pr.seed, "random seed");
    cmd_prune->add_option("--epochs", pr.epochs, "default retraining epochs");
    cmd_prune->add_option("--lr", pr.lr, "initial learning rate");
    cmd_prune->add_option("--batch-p", pr.batch_p, "classes per batch");
    cmd_prune->add_option("--batch-k", pr.batch_k, "samples per class");
    cmd_prune->add_flag("--force", pr_force, "overwrite existing results");

    // --- evaluate ------------------------------------------------------------
    std::string ev_data, ev_metric = "euclidean", ev_out, ev_csv;
    auto* cmd_eval = app.add_subcommand("evaluate", "MAP/MR1 retrieval evaluation");
    cmd_eval->add_option("--data", ev_data, "embedding file")->required();
    cmd_eval->add_option("--metric", ev_metric, "euclidean | cosine");
    cmd_eval->add_option("--out", ev_out, "write the report JSON here");
    cmd_eval->add_option("--per-query", ev_csv, "write per-query AP CSV here");

    // --- bench ---------------------------------------------------------------
    std::string be_dims = "256,4096", be_out;
    std::size_t be_refs = 100000;
    int be_repeats = 5;
    std::uint64_t be_seed = 1;
    auto* cmd_bench = app.add_subcommand("bench", "brute-force retrieval latency benchmark");
    cmd_bench->add_option("--dims", be_dims, "dimensions, comma separated");
    cmd_bench->add_option("--n-refs", be_refs, "reference count");
    cmd_bench->add_option("--repeats", be_repeats, "timing repeats per dimension");
    cmd_bench->add_option("--seed", be_seed, "random seed");
    cmd_bench->add_option("--out", be_out, "write the timing JSON here");

    // --- report --------------------------------------------------------------
    std::vector<std::string> rp_dirs;
    std::string rp_out;
    auto* cmd_report = app.add_subcommand("report", "merge summaries of several runs");
    cmd_report->add_option("--runs", rp_dirs, "run directories")->required()->expected(-1);
    cmd_report->add_option("--out", rp_out, "write the merged table here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // usage errors map onto the validation-failure exit code
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (cmd_run->parsed()) {
            std::string msg;
            const int rc = run_experiment_file(run_config_path, run_force, run_out_override, &msg);
            if (rc != 0) return fail(msg, rc);
            std::cout << "wrote results to "
                      << (run_out_override.empty()
                              ? ExperimentConfig::parse_file(run_config_path).out_dir
                              : run_out_override)
                      << "\n";
            return 0;
        }
        if (cmd_synth->parsed()) {
            if (synth_preset == "separable") {
                synth_cfg = SynthConfig::separable(synth_seed);
            } else if (synth_preset == "paper-shape") {
                synth_cfg = SynthConfig::paper_shape(synth_seed);
            } else {
                return fail("unknown preset: " + synth_preset, 1);
            }
            synth_cfg.seed = synth_seed;
            if (ov_cliques) synth_cfg.num_cliques = ov_cliques;
            if (ov_val_cliques) synth_cfg.num_val_cliques = ov_val_cliques;
            if (ov_dim) synth_cfg.teacher_dim = ov_dim;
            if (ov_size_min) synth_cfg.clique_size_min = ov_size_min;
            if (ov_size_max) synth_cfg.clique_size_max = ov_size_max;
            if (ov_val_size) synth_cfg.val_clique_size = ov_val_size;
            if (ov_center >= 0.0) synth_cfg.center_scale = ov_center;
            if (ov_noise >= 0.0) synth_cfg.noise_scale = ov_noise;
            if (ov_noise_items) synth_cfg.num_noise_items = ov_noise_items;

            const SynthResult data = generate_synthetic(synth_cfg);
            fs::create_directories(synth_out);
            const std::string train_path = (fs::path(synth_out) / "train.embd").string();
            const std::string val_path = (fs::path(synth_out) / "val.embd").string();
            save_embeddings(data.train, train_path);
            save_embeddings(data.val, val_path);
            save_manifest({train_path, val_path}, (fs::path(synth_out) / "manifest.txt").string());
            std::cout << "train: " << data.train.size() << " items, val: " << data.val.size()
                      << " items, dim " << synth_cfg.teacher_dim << "\n";
            return 0;
        }
        if (cmd_reduce->parsed()) {
            red.method = method_from_string(red_method);
            for (const auto& p : CLI::detail::split(red_dims, ','))
                red.dims.push_back(std::stoull(p));
            return run_config(red, red_force);
        }
        if (cmd_train->parsed() || cmd_distill->parsed()) {
            if (cmd_train->parsed()) {
                tr.method = method_from_string(tr_method);
                tr.loss = loss_kind_from_string(tr_loss);
            } else {
                tr.method = method_from_string(di_method);
            }
            tr.optimizer = optimizer_from_string(tr_optimizer);
            tr.eval_metric = metric_from_string(tr_metric);
            for (const auto& p : CLI::detail::split(tr_dims, ',')) tr.dims.push_back(std::stoull(p));
            if (!tr_milestones.empty()) {
                tr.lr_milestones.clear();
                for (const auto& p : CLI::detail::split(tr_milestones, ','))
                    tr.lr_milestones.push_back(std::stoi(p));
                tr.milestones_explicit = true;
            } else {
                std::vector<int> kept;
                for (int m : tr.lr_milestones)
                    if (m < tr.epochs) kept.push_back(m);
                tr.lr_milestones = kept;
            }
            return run_config(tr, tr_force);
        }
        if (cmd_prune->parsed()) {
            pr.method = Method::prune;
            pr.loss = loss_kind_from_string(pr_loss);
            std::vector<int> kept;
            for (int m : pr.lr_milestones)
                if (m < pr.epochs) kept.push_back(m);
            pr.lr_milestones = kept;
            return run_config(pr, pr_force);
        }
        if (cmd_eval->parsed()) {
            const EmbeddingSet set = load_embeddings(resolve_data_path(ev_data));
            const RetrievalReport rep = evaluate(set, metric_from_string(ev_metric));
            std::cout << report_to_table(rep);
            if (!ev_out.empty()) io::write_file(ev_out, report_to_json(rep));
            if (!ev_csv.empty()) io::write_file(ev_csv, per_query_csv(rep));
            return 0;
        }
        if (cmd_bench->parsed()) {
            std::vector<std::size_t> dims;
            for (const auto& p : CLI::detail::split(be_dims, ',')) dims.push_back(std::stoull(p));
            const auto rows = bench_retrieval(be_refs, dims, be_repeats, be_seed);
            std::cout << bench_to_table(rows);
            if (!be_out.empty()) io::write_file(be_out, bench_to_json(rows));
            return 0;
        }
        if (cmd_report->parsed()) {
            const std::string table = merge_summaries(rp_dirs);
            std::cout << table;
            if (!rp_out.empty()) io::write_file(rp_out, table);
            return 0;
        }
    } catch (const ConfigError& e) {
        return fail(e.what(), 1);
    } catch (const std::exception& e) {
        return fail(e.what(), 2);
    }
    return 0;
}
