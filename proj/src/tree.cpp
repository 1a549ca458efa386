#include "treedose/tree.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "treedose/draws.hpp"
#include "treedose/error.hpp"

namespace treedose {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<int> all_rows(const Eigen::MatrixXd& x) {
    std::vector<int> rows(static_cast<std::size_t>(x.rows()));
    for (int i = 0; i < x.rows(); ++i) rows[static_cast<std::size_t>(i)] = i;
    return rows;
}

void split_rows(const Eigen::MatrixXd& x, const std::vector<int>& rows, const SplitRule& rule,
                std::vector<int>& left, std::vector<int>& right) {
    left.clear();
    right.clear();
    for (int r : rows) {
        if (x(r, rule.var) <= rule.threshold)
            left.push_back(r);
        else
            right.push_back(r);
    }
}

std::vector<double> distinct_values(const Eigen::MatrixXd& x, const std::vector<int>& rows,
                                    int var) {
    std::vector<double> vals;
    vals.reserve(rows.size());
    for (int r : rows) vals.push_back(x(r, var));
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    return vals;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

double p_split(int depth, const TreePriorParams& params) {
    return params.alpha * std::pow(1.0 + depth, -params.nu);
}

// ---------------------------------------------------------------- Tree ----

int Tree::n_leaves() const {
    int n = 0;
    for (const auto& nd : nodes_) n += nd.is_leaf() ? 1 : 0;
    return n;
}

std::vector<int> Tree::leaf_nodes() const {
    std::vector<int> out;
    for (int i = 0; i < node_count(); ++i)
        if (nodes_[static_cast<std::size_t>(i)].is_leaf()) out.push_back(i);
    return out;
}

std::vector<int> Tree::internal_nodes() const {
    std::vector<int> out;
    for (int i = 0; i < node_count(); ++i)
        if (!nodes_[static_cast<std::size_t>(i)].is_leaf()) out.push_back(i);
    return out;
}

int Tree::depth(int node_index) const {
    int d = 0;
    while (nodes_[static_cast<std::size_t>(node_index)].parent >= 0) {
        node_index = nodes_[static_cast<std::size_t>(node_index)].parent;
        ++d;
    }
    return d;
}

int Tree::max_depth() const {
    int m = 0;
    for (int i : leaf_nodes()) m = std::max(m, depth(i));
    return m;
}

int Tree::route(const Eigen::VectorXd& x) const {
    int i = 0;
    while (!nodes_[static_cast<std::size_t>(i)].is_leaf()) {
        const TreeNode& nd = nodes_[static_cast<std::size_t>(i)];
        i = x(nd.rule.var) <= nd.rule.threshold ? nd.left : nd.right;
    }
    return i;
}

int Tree::assign_leaf(const Eigen::VectorXd& x) const { return leaf_ordinal(route(x)); }

int Tree::leaf_ordinal(int node_index) const {
    int ord = 0;
    for (int i = 0; i < node_index; ++i)
        if (nodes_[static_cast<std::size_t>(i)].is_leaf()) ++ord;
    return ord;
}

const Eigen::VectorXd& Tree::leaf_coeffs(int ordinal) const {
    return nodes_[static_cast<std::size_t>(leaf_nodes()[static_cast<std::size_t>(ordinal)])].coeffs;
}

void Tree::set_leaf_coeffs(int ordinal, Eigen::VectorXd coeffs) {
    nodes_[static_cast<std::size_t>(leaf_nodes()[static_cast<std::size_t>(ordinal)])].coeffs =
        std::move(coeffs);
}

void Tree::clear_coeffs() {
    for (auto& nd : nodes_) nd.coeffs.resize(0);
}

Tree Tree::from_nodes(std::vector<TreeNode> nodes) {
    if (nodes.empty()) throw ValidationError("tree needs at least a root node");
    Tree t;
    t.nodes_ = std::move(nodes);
    return t.rebuilt_preorder();
}

Tree Tree::rebuilt_preorder() const {
    Tree out;
    out.nodes_.clear();
    std::vector<std::pair<int, int>> stack{{0, -1}};  // (old index, new parent)
    while (!stack.empty()) {
        auto [old_idx, new_parent] = stack.back();
        stack.pop_back();
        const TreeNode& src = nodes_[static_cast<std::size_t>(old_idx)];
        const int new_idx = static_cast<int>(out.nodes_.size());
        TreeNode nd;
        nd.parent = new_parent;
        nd.rule = src.rule;
        nd.coeffs = src.coeffs;
        out.nodes_.push_back(std::move(nd));
        if (new_parent >= 0) {
            TreeNode& par = out.nodes_[static_cast<std::size_t>(new_parent)];
            (par.left < 0 ? par.left : par.right) = new_idx;  // left child is visited first
        }
        if (!src.is_leaf()) {
            stack.emplace_back(src.right, new_idx);
            stack.emplace_back(src.left, new_idx);
        }
    }
    return out;
}

Tree Tree::grow(int leaf_node, SplitRule rule) const {
    Tree t = *this;
    t.nodes_.reserve(t.nodes_.size() + 2);
    TreeNode& nd = t.nodes_[static_cast<std::size_t>(leaf_node)];
    nd.rule = rule;
    nd.coeffs.resize(0);
    TreeNode left, right;
    left.parent = leaf_node;
    right.parent = leaf_node;
    nd.left = static_cast<int>(t.nodes_.size());
    nd.right = nd.left + 1;
    t.nodes_.push_back(left);
    t.nodes_.push_back(right);
    return t.rebuilt_preorder();
}

Tree Tree::prune(int internal_node) const {
    Tree t = *this;
    TreeNode& nd = t.nodes_[static_cast<std::size_t>(internal_node)];
    nd.left = -1;
    nd.right = -1;
    nd.rule = SplitRule{};
    nd.coeffs.resize(0);
    return t.rebuilt_preorder();  // detached children dropped
}

Tree Tree::with_rule(int internal_node, SplitRule rule) const {
    Tree t = *this;
    t.nodes_[static_cast<std::size_t>(internal_node)].rule = rule;
    return t;
}

Tree Tree::with_swapped(int parent_node, int child_node) const {
    Tree t = *this;
    std::swap(t.nodes_[static_cast<std::size_t>(parent_node)].rule,
              t.nodes_[static_cast<std::size_t>(child_node)].rule);
    return t;
}

Tree Tree::with_both_swapped(int parent_node) const {
    Tree t = *this;
    TreeNode& par = t.nodes_[static_cast<std::size_t>(parent_node)];
    const SplitRule child_rule = t.nodes_[static_cast<std::size_t>(par.left)].rule;
    t.nodes_[static_cast<std::size_t>(par.left)].rule = par.rule;
    t.nodes_[static_cast<std::size_t>(par.right)].rule = par.rule;
    par.rule = child_rule;
    return t;
}

bool Tree::same_structure(const Tree& other) const {
    if (node_count() != other.node_count()) return false;
    for (int i = 0; i < node_count(); ++i) {
        const TreeNode& a = nodes_[static_cast<std::size_t>(i)];
        const TreeNode& b = other.nodes_[static_cast<std::size_t>(i)];
        if (a.left != b.left || a.right != b.right) return false;
        if (!a.is_leaf() && !(a.rule == b.rule)) return false;
    }
    return true;
}

std::string Tree::serialize() const {
    std::string out;
    struct Writer {
        const Tree& t;
        std::string& out;
        void emit(int i) {
            const TreeNode& nd = t.node(i);
            if (nd.is_leaf()) {
                out += "(leaf";
                for (int k = 0; k < nd.coeffs.size(); ++k) {
                    out += ' ';
                    out += format_double(nd.coeffs(k));
                }
                out += ')';
            } else {
                out += "(split ";
                out += std::to_string(nd.rule.var);
                out += ' ';
                out += format_double(nd.rule.threshold);
                out += ' ';
                emit(nd.left);
                out += ' ';
                emit(nd.right);
                out += ')';
            }
        }
    };
    Writer{*this, out}.emit(0);
    return out;
}

namespace {

struct TreeParser {
    const std::string& text;
    std::size_t pos = 0;

    void skip_ws() {
        while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    }
    void expect(char c) {
        skip_ws();
        if (pos >= text.size() || text[pos] != c)
            throw ValidationError("tree parse error near position " + std::to_string(pos));
        ++pos;
    }
    std::string token() {
        skip_ws();
        std::size_t start = pos;
        while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos])) &&
               text[pos] != '(' && text[pos] != ')')
            ++pos;
        if (start == pos) throw ValidationError("tree parse error: empty token");
        return text.substr(start, pos - start);
    }
    bool peek_close() {
        skip_ws();
        return pos < text.size() && text[pos] == ')';
    }

    int parse_node(std::vector<TreeNode>& nodes, int parent) {
        expect('(');
        const std::string kind = token();
        const int idx = static_cast<int>(nodes.size());
        nodes.emplace_back();
        nodes[static_cast<std::size_t>(idx)].parent = parent;
        if (kind == "leaf") {
            std::vector<double> cs;
            while (!peek_close()) cs.push_back(std::stod(token()));
            expect(')');
            Eigen::VectorXd v(static_cast<Eigen::Index>(cs.size()));
            for (std::size_t k = 0; k < cs.size(); ++k) v(static_cast<Eigen::Index>(k)) = cs[k];
            nodes[static_cast<std::size_t>(idx)].coeffs = std::move(v);
        } else if (kind == "split") {
            SplitRule rule;
            rule.var = std::stoi(token());
            rule.threshold = std::stod(token());
            nodes[static_cast<std::size_t>(idx)].rule = rule;
            const int left = parse_node(nodes, idx);
            const int right = parse_node(nodes, idx);
            nodes[static_cast<std::size_t>(idx)].left = left;
            nodes[static_cast<std::size_t>(idx)].right = right;
            expect(')');
        } else {
            throw ValidationError("tree parse error: unknown node kind '" + kind + "'");
        }
        return idx;
    }
};

}  // namespace

Tree Tree::deserialize(const std::string& text) {
    Tree t;
    t.nodes_.clear();
    TreeParser parser{text};
    parser.parse_node(t.nodes_, -1);
    parser.skip_ws();
    if (parser.pos != text.size()) throw ValidationError("tree parse error: trailing input");
    return t;
}

// ---------------------------------------------------- prior & proposals ----

std::vector<double> split_values(const Eigen::MatrixXd& covariates, const std::vector<int>& rows,
                                 int var) {
    std::vector<double> vals = distinct_values(covariates, rows, var);
    if (!vals.empty()) vals.pop_back();  // the largest value would empty the right child
    return vals;
}

std::vector<int> available_predictors(const Eigen::MatrixXd& covariates,
                                      const std::vector<int>& rows) {
    std::vector<int> vars;
    for (int j = 0; j < covariates.cols(); ++j) {
        bool seen = false;
        double first = 0.0;
        for (int r : rows) {
            const double v = covariates(r, j);
            if (!seen) {
                first = v;
                seen = true;
            } else if (v != first) {
                vars.push_back(j);
                break;
            }
        }
    }
    return vars;
}

namespace {

struct PriorSampler {
    const Eigen::MatrixXd& x;
    const TreePriorParams& params;
    Rng& rng;
    std::vector<TreeNode> nodes;

    int build(const std::vector<int>& rows, int depth, int parent) {
        const int idx = static_cast<int>(nodes.size());
        nodes.emplace_back();
        nodes[static_cast<std::size_t>(idx)].parent = parent;
        const double u = draw_uniform(rng);
        const std::vector<int> avail = available_predictors(x, rows);
        if (u < p_split(depth, params) && !avail.empty()) {
            SplitRule rule;
            rule.var = avail[static_cast<std::size_t>(draw_index(rng, static_cast<int>(avail.size())))];
            const std::vector<double> vals = split_values(x, rows, rule.var);
            rule.threshold = vals[static_cast<std::size_t>(draw_index(rng, static_cast<int>(vals.size())))];
            nodes[static_cast<std::size_t>(idx)].rule = rule;
            std::vector<int> left_rows, right_rows;
            split_rows(x, rows, rule, left_rows, right_rows);
            const int l = build(left_rows, depth + 1, idx);
            nodes[static_cast<std::size_t>(idx)].left = l;
            const int r = build(right_rows, depth + 1, idx);
            nodes[static_cast<std::size_t>(idx)].right = r;
        }
        return idx;
    }
};

}  // namespace

Tree sample_tree_prior(const Eigen::MatrixXd& covariates, const TreePriorParams& params,
                       Rng& rng) {
    if (covariates.rows() < 1) throw ValidationError("need at least one particle");
    PriorSampler sampler{covariates, params, rng, {}};
    sampler.build(all_rows(covariates), 0, -1);
    return Tree::from_nodes(std::move(sampler.nodes));
}

double log_tree_prior(const Tree& tree, const Eigen::MatrixXd& covariates,
                      const TreePriorParams& params) {
    double logp = 0.0;
    std::vector<std::pair<int, std::vector<int>>> stack;
    stack.emplace_back(0, all_rows(covariates));
    while (!stack.empty()) {
        auto [idx, rows] = std::move(stack.back());
        stack.pop_back();
        if (rows.empty()) return kNegInf;
        const TreeNode& nd = tree.node(idx);
        const int depth = tree.depth(idx);
        const std::vector<int> avail = available_predictors(covariates, rows);
        if (nd.is_leaf()) {
            if (!avail.empty()) logp += std::log1p(-p_split(depth, params));
            continue;
        }
        if (avail.empty()) return kNegInf;
        // The generating process only draws thresholds from the in-node split
        // values, so membership is part of the support.
        const std::vector<double> vals = split_values(covariates, rows, nd.rule.var);
        if (!std::binary_search(vals.begin(), vals.end(), nd.rule.threshold)) return kNegInf;
        logp += std::log(p_split(depth, params)) - std::log(static_cast<double>(avail.size())) -
                std::log(static_cast<double>(vals.size()));
        std::vector<int> left_rows, right_rows;
        split_rows(covariates, rows, nd.rule, left_rows, right_rows);
        stack.emplace_back(nd.left, std::move(left_rows));
        stack.emplace_back(nd.right, std::move(right_rows));
    }
    return logp;
}

std::vector<std::vector<int>> leaf_partition(const Tree& tree, const Eigen::MatrixXd& covariates) {
    std::vector<std::vector<int>> parts(static_cast<std::size_t>(tree.n_leaves()));
    for (int i = 0; i < covariates.rows(); ++i)
        parts[static_cast<std::size_t>(tree.assign_leaf(covariates.row(i).transpose()))].push_back(i);
    return parts;
}

const char* move_name(TreeMove move) {
    switch (move) {
        case TreeMove::Grow: return "grow";
        case TreeMove::Prune: return "prune";
        case TreeMove::Change: return "change";
        case TreeMove::Swap: return "swap";
    }
    return "?";
}

namespace {

// Particle subset reaching each node.
std::vector<std::vector<int>> node_subsets(const Tree& tree, const Eigen::MatrixXd& x) {
    std::vector<std::vector<int>> subsets(static_cast<std::size_t>(tree.node_count()));
    subsets[0] = all_rows(x);
    for (int i = 0; i < tree.node_count(); ++i) {
        const TreeNode& nd = tree.node(i);
        if (nd.is_leaf()) continue;
        split_rows(x, subsets[static_cast<std::size_t>(i)], nd.rule,
                   subsets[static_cast<std::size_t>(nd.left)],
                   subsets[static_cast<std::size_t>(nd.right)]);
    }
    return subsets;
}

std::vector<int> prunable_nodes(const Tree& tree) {
    std::vector<int> out;
    for (int i : tree.internal_nodes()) {
        const TreeNode& nd = tree.node(i);
        if (tree.node(nd.left).is_leaf() && tree.node(nd.right).is_leaf()) out.push_back(i);
    }
    return out;
}

std::vector<int> swappable_nodes(const Tree& tree) {
    std::vector<int> out;
    for (int i : tree.internal_nodes()) {
        const TreeNode& nd = tree.node(i);
        if (!tree.node(nd.left).is_leaf() || !tree.node(nd.right).is_leaf()) out.push_back(i);
    }
    return out;
}

MoveProposal make_noop(TreeMove move, const Tree& tree) {
    MoveProposal p;
    p.candidate = tree;
    p.move = move;
    p.noop = true;
    return p;
}

}  // namespace

MoveProposal propose_move(const Tree& tree, const Eigen::MatrixXd& covariates,
                          const std::array<double, 4>& move_probs, const TreePriorParams& params,
                          Rng& rng) {
    (void)params;
    // move selection by cumulative walk keeps engine use deterministic
    const double u = draw_uniform(rng);
    TreeMove move = TreeMove::Swap;
    double cum = 0.0;
    for (int m = 0; m < 4; ++m) {
        cum += move_probs[static_cast<std::size_t>(m)];
        if (u < cum) {
            move = static_cast<TreeMove>(m);
            break;
        }
    }

    const auto subsets = node_subsets(tree, covariates);
    MoveProposal out;
    out.move = move;

    switch (move) {
        case TreeMove::Grow: {
            const std::vector<int> leaves = tree.leaf_nodes();
            const int leaf =
                leaves[static_cast<std::size_t>(draw_index(rng, static_cast<int>(leaves.size())))];
            const std::vector<int>& rows = subsets[static_cast<std::size_t>(leaf)];
            const std::vector<int> avail = available_predictors(covariates, rows);
            if (avail.empty()) return make_noop(move, tree);
            SplitRule rule;
            rule.var = avail[static_cast<std::size_t>(draw_index(rng, static_cast<int>(avail.size())))];
            const std::vector<double> vals = split_values(covariates, rows, rule.var);
            rule.threshold =
                vals[static_cast<std::size_t>(draw_index(rng, static_cast<int>(vals.size())))];
            out.candidate = tree.grow(leaf, rule);
            const double log_q_fwd = std::log(move_probs[0]) -
                                     std::log(static_cast<double>(leaves.size())) -
                                     std::log(static_cast<double>(avail.size())) -
                                     std::log(static_cast<double>(vals.size()));
            const double log_q_rev =
                std::log(move_probs[1]) -
                std::log(static_cast<double>(prunable_nodes(out.candidate).size()));
            out.log_ratio = log_q_rev - log_q_fwd;
            return out;
        }
        case TreeMove::Prune: {
            const std::vector<int> prunable = prunable_nodes(tree);
            if (prunable.empty()) return make_noop(move, tree);
            const int node =
                prunable[static_cast<std::size_t>(draw_index(rng, static_cast<int>(prunable.size())))];
            const SplitRule rule = tree.node(node).rule;
            const std::vector<int>& rows = subsets[static_cast<std::size_t>(node)];
            out.candidate = tree.prune(node);
            const double log_q_fwd =
                std::log(move_probs[1]) - std::log(static_cast<double>(prunable.size()));
            // reverse GROW must redraw exactly the removed rule
            const std::vector<int> avail = available_predictors(covariates, rows);
            const std::vector<double> vals = split_values(covariates, rows, rule.var);
            const double log_q_rev = std::log(move_probs[0]) -
                                     std::log(static_cast<double>(out.candidate.n_leaves())) -
                                     std::log(static_cast<double>(avail.size())) -
                                     std::log(static_cast<double>(vals.size()));
            out.log_ratio = log_q_rev - log_q_fwd;
            return out;
        }
        case TreeMove::Change: {
            const std::vector<int> internals = tree.internal_nodes();
            if (internals.empty()) return make_noop(move, tree);
            const int node =
                internals[static_cast<std::size_t>(draw_index(rng, static_cast<int>(internals.size())))];
            const std::vector<int>& rows = subsets[static_cast<std::size_t>(node)];
            const std::vector<int> avail = available_predictors(covariates, rows);
            if (avail.empty()) return make_noop(move, tree);
            SplitRule rule;
            rule.var = avail[static_cast<std::size_t>(draw_index(rng, static_cast<int>(avail.size())))];
            const std::vector<double> vals = split_values(covariates, rows, rule.var);
            rule.threshold =
                vals[static_cast<std::size_t>(draw_index(rng, static_cast<int>(vals.size())))];
            const SplitRule old_rule = tree.node(node).rule;
            out.candidate = tree.with_rule(node, rule);
            // node subset is unchanged by its own rule, so the reverse draw
            // sees the same predictor availability
            const std::vector<double> old_vals = split_values(covariates, rows, old_rule.var);
            out.log_ratio = std::log(static_cast<double>(vals.size())) -
                            std::log(static_cast<double>(old_vals.size()));
            return out;
        }
        case TreeMove::Swap: {
            const std::vector<int> swappable = swappable_nodes(tree);
            if (swappable.empty()) return make_noop(move, tree);
            const int node =
                swappable[static_cast<std::size_t>(draw_index(rng, static_cast<int>(swappable.size())))];
            const TreeNode& nd = tree.node(node);
            std::vector<int> internal_children;
            if (!tree.node(nd.left).is_leaf()) internal_children.push_back(nd.left);
            if (!tree.node(nd.right).is_leaf()) internal_children.push_back(nd.right);
            double log_fwd_branch = 0.0;
            const bool both_same = internal_children.size() == 2 &&
                                   tree.node(nd.left).rule == tree.node(nd.right).rule;
            if (both_same) {
                out.candidate = tree.with_both_swapped(node);
            } else {
                const int child = internal_children[static_cast<std::size_t>(
                    draw_index(rng, static_cast<int>(internal_children.size())))];
                out.candidate = tree.with_swapped(node, child);
                log_fwd_branch = -std::log(static_cast<double>(internal_children.size()));
            }

            // Reverse probability: which swap branches at this node map the
            // candidate back to the current tree? None means irreversible,
            // which forces a rejection.
            const Tree& cnd = out.candidate;
            const TreeNode& cn = cnd.node(node);
            std::vector<int> rev_children;
            if (!cnd.node(cn.left).is_leaf()) rev_children.push_back(cn.left);
            if (!cnd.node(cn.right).is_leaf()) rev_children.push_back(cn.right);
            const bool rev_both_same = rev_children.size() == 2 &&
                                       cnd.node(cn.left).rule == cnd.node(cn.right).rule;
            double rev_prob = 0.0;
            if (rev_both_same) {
                if (cnd.with_both_swapped(node).same_structure(tree)) rev_prob = 1.0;
            } else {
                for (int child : rev_children)
                    if (cnd.with_swapped(node, child).same_structure(tree))
                        rev_prob += 1.0 / static_cast<double>(rev_children.size());
            }
            if (rev_prob <= 0.0) {
                out.log_ratio = kNegInf;
                return out;
            }
            const double log_q_fwd =
                -std::log(static_cast<double>(swappable.size())) + log_fwd_branch;
            const double log_q_rev =
                -std::log(static_cast<double>(swappable_nodes(cnd).size())) + std::log(rev_prob);
            out.log_ratio = log_q_rev - log_q_fwd;
            return out;
        }
    }
    return make_noop(move, tree);
}

bool mh_prior_step(Tree& tree, const Eigen::MatrixXd& covariates,
                   const std::array<double, 4>& move_probs, const TreePriorParams& params,
                   Rng& rng) {
    MoveProposal prop = propose_move(tree, covariates, move_probs, params, rng);
    if (prop.noop) return false;
    const double log_accept = log_tree_prior(prop.candidate, covariates, params) -
                              log_tree_prior(tree, covariates, params) + prop.log_ratio;
    if (std::log(draw_uniform(rng)) < log_accept) {
        tree = std::move(prop.candidate);
        return true;
    }
    return false;
}

}  // namespace treedose
