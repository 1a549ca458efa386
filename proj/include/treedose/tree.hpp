#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "treedose/rng.hpp"

namespace treedose {

// Binary regression tree over particle covariates. Splits are on covariates
// only, never on dose or time, so all observations of a particle share one
// leaf. Trees are immutable values: every move builds a new tree with nodes
// stored in pre-order.

struct SplitRule {
    int var = -1;
    double threshold = 0.0;

    friend bool operator==(const SplitRule& a, const SplitRule& b) {
        return a.var == b.var && a.threshold == b.threshold;
    }
};

struct TreePriorParams {
    double alpha = 0.95;
    double nu = 2.0;
};

// Probability that a node at the given depth is nonterminal,
// alpha * (1 + depth)^(-nu), with the root at depth 0.
double p_split(int depth, const TreePriorParams& params);

struct TreeNode {
    int left = -1;
    int right = -1;
    int parent = -1;
    SplitRule rule;          // internal nodes only
    Eigen::VectorXd coeffs;  // leaves only; empty until drawn

    bool is_leaf() const { return left < 0; }
};

class Tree {
  public:
    Tree() : nodes_(1) {}

    int node_count() const { return static_cast<int>(nodes_.size()); }
    const TreeNode& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
    int n_leaves() const;
    std::vector<int> leaf_nodes() const;      // node indices, pre-order
    std::vector<int> internal_nodes() const;  // node indices, pre-order
    int depth(int node_index) const;
    int max_depth() const;

    // Routing: x goes left iff x[var] <= threshold.
    int route(const Eigen::VectorXd& x) const;        // node index of the leaf
    int assign_leaf(const Eigen::VectorXd& x) const;  // ordinal among leaves in pre-order

    int leaf_ordinal(int node_index) const;
    const Eigen::VectorXd& leaf_coeffs(int leaf_ordinal) const;
    void set_leaf_coeffs(int leaf_ordinal, Eigen::VectorXd coeffs);
    void clear_coeffs();

    // Structural edits (used by the proposal moves); each returns a new tree.
    Tree grow(int leaf_node, SplitRule rule) const;
    Tree prune(int internal_node) const;
    Tree with_rule(int internal_node, SplitRule rule) const;
    Tree with_swapped(int parent_node, int child_node) const;
    Tree with_both_swapped(int parent_node) const;  // parent <-> both children, for identical child rules

    // Topology and split rules, coefficients ignored.
    bool same_structure(const Tree& other) const;

    // Nested text form: (split var threshold LEFT RIGHT) / (leaf c1 c2 ...).
    std::string serialize() const;
    static Tree deserialize(const std::string& text);

    // Assemble from an explicit node list (any consistent indexing); nodes
    // are re-stored in pre-order.
    static Tree from_nodes(std::vector<TreeNode> nodes);

  private:
    std::vector<TreeNode> nodes_;  // root at 0, kept in pre-order

    Tree rebuilt_preorder() const;
};

// -- prior and proposals over a covariate matrix (particles x p) ------------

// Distinct observed values of one covariate over a particle subset, sorted,
// with the largest dropped: the thresholds that leave both children nonempty.
std::vector<double> split_values(const Eigen::MatrixXd& covariates,
                                 const std::vector<int>& rows, int var);

// Covariates with at least two distinct values on the subset.
std::vector<int> available_predictors(const Eigen::MatrixXd& covariates,
                                      const std::vector<int>& rows);

// Top-down draw from the stochastic tree-generating prior. A node with no
// valid split becomes terminal. Leaves carry unset coefficients.
Tree sample_tree_prior(const Eigen::MatrixXd& covariates, const TreePriorParams& params,
                       Rng& rng);

// Log prior of a tree under the generating process. The support is exactly
// what the top-down draw can produce: every threshold must be one of the
// split values of the particle subset reaching its node, no leaf may be
// empty, and no internal node may lack an available predictor. Anything else
// gets -infinity. Leaves with no available split are terminal with
// probability one.
double log_tree_prior(const Tree& tree, const Eigen::MatrixXd& covariates,
                      const TreePriorParams& params);

// Particle indices per leaf ordinal.
std::vector<std::vector<int>> leaf_partition(const Tree& tree,
                                             const Eigen::MatrixXd& covariates);

enum class TreeMove { Grow = 0, Prune = 1, Change = 2, Swap = 3 };
const char* move_name(TreeMove move);

struct MoveProposal {
    Tree candidate;
    // log q(old | new) - log q(new | old); -infinity when the reverse move
    // cannot reproduce the current tree.
    double log_ratio = 0.0;
    TreeMove move = TreeMove::Grow;
    bool noop = false;  // structurally impossible; callers count it as a rejection
};

// One Metropolis-Hastings proposal. move_probs orders grow, prune, change,
// swap and must sum to one. Proposals may fall outside the prior support
// (empty leaf, stale threshold after a change or swap); those come back with
// a finite log_ratio and are rejected by the caller through the prior term,
// or with log_ratio = -infinity when the reverse move cannot reproduce the
// current tree. Structurally impossible draws are flagged noop and counted
// as rejections.
MoveProposal propose_move(const Tree& tree, const Eigen::MatrixXd& covariates,
                          const std::array<double, 4>& move_probs,
                          const TreePriorParams& params, Rng& rng);

// Flat-likelihood MH step: accept on prior ratio + proposal ratio alone.
// Returns true on acceptance. The stationary law is the tree prior, which
// makes this the reference kernel for prior-recovery checks.
bool mh_prior_step(Tree& tree, const Eigen::MatrixXd& covariates,
                   const std::array<double, 4>& move_probs, const TreePriorParams& params,
                   Rng& rng);

}  // namespace treedose
