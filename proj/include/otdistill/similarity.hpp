#pragma once

#include <cstddef>
#include <vector>

#include "otdistill/autograd.hpp"

namespace otdistill {

enum class SimSource { Teacher, Student };

// Batch-level relational structure. Full form is the b x b matrix of
// pairwise row cosines; reduced form keeps all b rows but only the columns
// at anchor_indices (b x k). anchor_indices is empty exactly in the full
// form and strictly increasing in the reduced form.
struct SimilarityMatrix {
    ag::NodePtr values;
    std::vector<std::size_t> anchor_indices;
    SimSource source = SimSource::Teacher;

    bool is_full() const { return anchor_indices.empty(); }
    std::size_t batch() const { return values->value.rows(); }
};

// S[i][j] = <row_i, row_j> / (|row_i| |row_j|), differentiable w.r.t. the
// feature batch. Needs b >= 2 and no zero rows.
SimilarityMatrix cosine_similarity_matrix(const ag::NodePtr& features, SimSource source);

// Indices of the k rows least similar to the rest of the batch: lowest
// off-diagonal row-sum, ties to the lower index. The chosen set is returned
// ascending by index so it can serve directly as column indices.
std::vector<std::size_t> select_anchors(const SimilarityMatrix& sim, std::size_t k);

// Column gather at anchor_indices; gradient scatters back to the selected
// columns of the source.
SimilarityMatrix reduce_to_anchors(const SimilarityMatrix& sim,
                                   const std::vector<std::size_t>& anchor_indices);

}  // namespace otdistill
