#include "otdistill/similarity.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "otdistill/errors.hpp"

namespace otdistill {

SimilarityMatrix cosine_similarity_matrix(const ag::NodePtr& features, SimSource source) {
    const std::size_t b = features->value.rows();
    if (b < 2) {
        throw ContractError("cosine_similarity_matrix: need at least 2 rows, got " +
                            std::to_string(b));
    }
    // S = (f f^T) / (n n^T), with n the column of row norms. The two div
    // broadcasts scale row i by 1/n_i and column j by 1/n_j.
    auto norms = ag::rowwise_l2norm(features);  // throws ZeroRowError on a zero row
    auto gram = ag::matmul(features, ag::transpose(features));
    auto sim = ag::div(ag::div(gram, norms), ag::transpose(norms));
    return SimilarityMatrix{sim, {}, source};
}

std::vector<std::size_t> select_anchors(const SimilarityMatrix& sim, std::size_t k) {
    if (!sim.is_full()) {
        throw ContractError("select_anchors: expected a full similarity matrix, got reduced");
    }
    const Matrix& s = sim.values->value;
    const std::size_t b = s.rows();
    if (s.cols() != b) {
        throw ContractError("select_anchors: similarity matrix must be square, got " +
                            s.shape_str());
    }
    if (k < 1 || k > b) {
        throw BoundsError("select_anchors: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(b) + "]");
    }

    // Off-diagonal row-sums; self-similarity is excluded so the ranking is
    // pure dissimilarity to the rest of the batch.
    std::vector<std::pair<double, std::size_t>> ranked(b);
    for (std::size_t i = 0; i < b; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < b; ++j) {
            if (j != i) sum += s.at(i, j);
        }
        ranked[i] = {sum, i};
    }
    std::sort(ranked.begin(), ranked.end());  // ties fall to the lower index

    std::vector<std::size_t> anchors(k);
    for (std::size_t i = 0; i < k; ++i) anchors[i] = ranked[i].second;
    std::sort(anchors.begin(), anchors.end());
    return anchors;
}

SimilarityMatrix reduce_to_anchors(const SimilarityMatrix& sim,
                                   const std::vector<std::size_t>& anchor_indices) {
    if (!sim.is_full()) {
        throw ContractError("reduce_to_anchors: input is already reduced");
    }
    if (anchor_indices.empty()) {
        throw ContractError("reduce_to_anchors: no anchor indices given");
    }
    const std::size_t b = sim.values->value.cols();
    for (std::size_t i = 0; i < anchor_indices.size(); ++i) {
        if (anchor_indices[i] >= b) {
            throw ContractError("reduce_to_anchors: index " +
                                std::to_string(anchor_indices[i]) + " out of range for " +
                                std::to_string(b) + " columns");
        }
        if (i > 0 && anchor_indices[i] <= anchor_indices[i - 1]) {
            throw ContractError("reduce_to_anchors: anchor indices must be strictly "
                                "increasing and unique");
        }
    }
    auto reduced = ag::gather_cols(sim.values, anchor_indices);
    return SimilarityMatrix{reduced, anchor_indices, sim.source};
}

}  // namespace otdistill
