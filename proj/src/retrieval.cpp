#include "embdistill/retrieval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "embdistill/metrics.hpp"
#include "embdistill/rng.hpp"
#include "json.hpp"

namespace embd {

std::string to_string(Metric m) {
    return m == Metric::squared_euclidean ? "squared-euclidean" : "cosine-distance";
}

Metric metric_from_string(const std::string& s) {
    if (s == "squared-euclidean" || s == "euclidean" || s == "eq2") {
        return Metric::squared_euclidean;
    }
    if (s == "cosine-distance" || s == "cosine") return Metric::cosine_distance;
    throw ConfigError("unknown metric: " + s);
}

MatrixD pairwise_distances(const Matrix& Q, const Matrix& R, Metric metric) {
    if (Q.cols() != R.cols()) {
        throw DimensionError("pairwise_distances: " + std::to_string(Q.cols()) + " vs " +
                             std::to_string(R.cols()) + " columns");
    }
    MatrixD out(Q.rows(), R.rows());
    for (std::size_t i = 0; i < Q.rows(); ++i) {
        for (std::size_t j = 0; j < R.rows(); ++j) {
            out(i, j) = metric == Metric::squared_euclidean
                            ? squared_dist(Q.row(i), R.row(j))
                            : 1.0 - cosine_sim(Q.row(i), R.row(j));
        }
    }
    return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

RetrievalReport evaluate_vectors(const Matrix& vectors, const std::vector<Item>& items,
                                 Metric metric) {
    if (vectors.rows() != items.size()) {
        throw DimensionError("evaluate: vectors/items row mismatch");
    }
    const std::size_t n = items.size();

    std::size_t labeled_with_partner = 0;
    {
        std::map<Label, std::size_t> counts;
        for (const Item& it : items) {
            if (it.clique) counts[*it.clique]++;
        }
        for (const Item& it : items) {
            if (it.clique && counts[*it.clique] >= 2) ++labeled_with_partner;
        }
    }
    if (labeled_with_partner == 0) {
        throw EvalError("evaluate: no labeled clique with >= 2 members");
    }

    RetrievalReport rep;
    const auto t_start = Clock::now();

    std::vector<double> dist(n);
    std::vector<std::size_t> order(n);
    double dist_time = 0.0, sort_time = 0.0;
    double ap_sum = 0.0, rank_sum = 0.0;

    for (std::size_t q = 0; q < n; ++q) {
        if (!items[q].clique) continue;  // noise items are never queried
        const Label clique = *items[q].clique;

        const auto t_d = Clock::now();
        for (std::size_t j = 0; j < n; ++j) {
            dist[j] = metric == Metric::squared_euclidean
                          ? squared_dist(vectors.row(q), vectors.row(j))
                          : 1.0 - cosine_sim(vectors.row(q), vectors.row(j));
        }
        dist_time += seconds_since(t_d);

        std::size_t total_relevant = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j != q && items[j].clique && *items[j].clique == clique) ++total_relevant;
        }
        if (total_relevant == 0) {
            rep.queries_excluded++;
            continue;
        }

        const auto t_s = Clock::now();
        order.resize(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        order.erase(std::remove(order.begin(), order.end(), q), order.end());
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (dist[a] != dist[b]) return dist[a] < dist[b];
            return a < b;
        });
        sort_time += seconds_since(t_s);

        std::size_t hits = 0;
        double ap = 0.0;
        std::size_t first = 0;
        for (std::size_t rank = 1; rank <= order.size(); ++rank) {
            const std::size_t j = order[rank - 1];
            if (items[j].clique && *items[j].clique == clique) {
                ++hits;
                ap += static_cast<double>(hits) / static_cast<double>(rank);
                if (first == 0) first = rank;
                if (hits == total_relevant) break;
            }
        }
        ap /= static_cast<double>(total_relevant);
        rep.per_query_ap.push_back(ap);
        rep.first_rank.push_back(first);
        ap_sum += ap;
        rank_sum += static_cast<double>(first);
    }

    rep.queries_evaluated = rep.per_query_ap.size();
    rep.map = ap_sum / static_cast<double>(rep.queries_evaluated);
    rep.mr1 = rank_sum / static_cast<double>(rep.queries_evaluated);
    rep.timing.distance_seconds = dist_time;
    rep.timing.sort_seconds = sort_time;
    rep.timing.total_seconds = seconds_since(t_start);
    return rep;
}

RetrievalReport evaluate(const EmbeddingSet& set, Metric metric) {
    return evaluate_vectors(set.vectors, set.items, metric);
}

std::string report_to_json(const RetrievalReport& rep) {
    nlohmann::json j;
    j["map"] = rep.map;
    j["mr1"] = rep.mr1;
    j["queries_evaluated"] = rep.queries_evaluated;
    j["queries_excluded"] = rep.queries_excluded;
    j["timing"] = {{"distance_seconds", rep.timing.distance_seconds},
                   {"sort_seconds", rep.timing.sort_seconds},
                   {"total_seconds", rep.timing.total_seconds}};
    return j.dump(2);
}

std::string report_to_table(const RetrievalReport& rep) {
    std::ostringstream os;
    os << "queries: " << rep.queries_evaluated;
    if (rep.queries_excluded > 0) os << " (excluded " << rep.queries_excluded << ")";
    os << "\n";
    char buf[128];
    std::snprintf(buf, sizeof(buf), "MAP: %.4f\nMR1: %.2f\n", rep.map, rep.mr1);
    os << buf;
    std::snprintf(buf, sizeof(buf), "time: %.3fs distances, %.3fs sorting, %.3fs total\n",
                  rep.timing.distance_seconds, rep.timing.sort_seconds,
                  rep.timing.total_seconds);
    os << buf;
    return os.str();
}

std::string per_query_csv(const RetrievalReport& rep) {
    std::ostringstream os;
    os << "query_index,ap,first_rank\n";
    for (std::size_t i = 0; i < rep.per_query_ap.size(); ++i) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%zu\n", i, rep.per_query_ap[i],
                      rep.first_rank[i]);
        os << buf;
    }
    return os.str();
}

std::vector<BenchRow> bench_retrieval(std::size_t n_refs, const std::vector<std::size_t>& dims,
                                      int repeats, std::uint64_t seed) {
    if (n_refs < 1) throw ConfigError("bench: n_refs must be >= 1");
    if (dims.empty()) throw ConfigError("bench: need at least one dimension");
    if (repeats < 1) throw ConfigError("bench: repeats must be >= 1");

    std::vector<BenchRow> rows;
    for (std::size_t d : dims) {
        // Reference and query fills are uniform; timing does not depend on
        // the value distribution.
        Rng rng(mix_seed(seed, d));
        Matrix refs(n_refs, d);
        for (float& v : refs.storage()) v = static_cast<float>(rng.next_double());
        Matrix query(1, d);
        for (float& v : query.storage()) v = static_cast<float>(rng.next_double());

        BenchRow row;
        row.dim = d;
        std::vector<double> dist(n_refs);
        for (int rep = 0; rep < repeats; ++rep) {
            const auto t0 = Clock::now();
            // The simple brute-force double loop whose cost is being measured.
            for (std::size_t j = 0; j < n_refs; ++j) {
                dist[j] = squared_dist(crow(query, 0), crow(refs, j));
            }
            row.run_seconds.push_back(seconds_since(t0));
        }
        double checksum = 0.0;
        for (double v : dist) checksum += v;
        row.distance_checksum = checksum;

        std::vector<double> sorted = row.run_seconds;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t m = sorted.size();
        row.median_seconds =
            (m % 2 == 1) ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
        rows.push_back(std::move(row));
    }

    const auto smallest = std::min_element(rows.begin(), rows.end(),
                                           [](const BenchRow& a, const BenchRow& b) {
                                               return a.dim < b.dim;
                                           });
    for (BenchRow& row : rows) {
        row.ratio_vs_smallest =
            smallest->median_seconds > 0.0 ? row.median_seconds / smallest->median_seconds : 0.0;
    }
    return rows;
}

std::string bench_to_table(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os << "dim      median_s     ratio\n";
    for (const BenchRow& r : rows) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%-8zu %-12.6f %.2f\n", r.dim, r.median_seconds,
                      r.ratio_vs_smallest);
        os << buf;
    }
    return os.str();
}

std::string bench_to_json(const std::vector<BenchRow>& rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const BenchRow& r : rows) {
        j.push_back({{"dim", r.dim},
                     {"median_seconds", r.median_seconds},
                     {"run_seconds", r.run_seconds},
                     {"ratio_vs_smallest", r.ratio_vs_smallest}});
    }
    return j.dump(2);
}

}  // namespace embd
