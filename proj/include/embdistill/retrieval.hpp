#ifndef EMBDISTILL_RETRIEVAL_HPP
#define EMBDISTILL_RETRIEVAL_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "embdistill/dataset.hpp"
#include "embdistill/matrix.hpp"

namespace embd {

enum class Metric { squared_euclidean, cosine_distance };

std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

// |Q| x |R| distances, 64-bit accumulation, row-major over queries.
MatrixD pairwise_distances(const Matrix& Q, const Matrix& R, Metric metric);

struct RetrievalTiming {
    double distance_seconds = 0.0;
    double sort_seconds = 0.0;
    double total_seconds = 0.0;
};

struct RetrievalReport {
    double map = 0.0;
    double mr1 = 0.0;
    std::vector<double> per_query_ap;     // valid queries only, query order
    std::vector<std::size_t> first_rank;  // 1-based rank of first relevant
    std::size_t queries_evaluated = 0;
    std::size_t queries_excluded = 0;  // labeled items with no relevant candidate
    RetrievalTiming timing;
};

// Queries are all labeled items; candidates are every other item (noise items
// included as candidates, never as queries). Distance ties break by candidate
// index; ranks are 1-based.
RetrievalReport evaluate(const EmbeddingSet& set, Metric metric);

// Same protocol with embeddings supplied separately (must align with
// set.items row-for-row); used to score a trained head on a dataset.
RetrievalReport evaluate_vectors(const Matrix& vectors, const std::vector<Item>& items,
                                 Metric metric);

std::string report_to_json(const RetrievalReport& rep);
std::string report_to_table(const RetrievalReport& rep);
std::string per_query_csv(const RetrievalReport& rep);

struct BenchRow {
    std::size_t dim = 0;
    double median_seconds = 0.0;
    std::vector<double> run_seconds;
    double ratio_vs_smallest = 0.0;
    double distance_checksum = 0.0;  // invariant across repeat counts
};

// One query against n_refs random references per dimension; the median
// wall-clock over `repeats` runs, with ratios relative to the smallest d.
std::vector<BenchRow> bench_retrieval(std::size_t n_refs, const std::vector<std::size_t>& dims,
                                      int repeats, std::uint64_t seed);

std::string bench_to_table(const std::vector<BenchRow>& rows);
std::string bench_to_json(const std::vector<BenchRow>& rows);

}  // namespace embd

#endif
