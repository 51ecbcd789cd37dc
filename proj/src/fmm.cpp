#include "pkifmm/fmm.hpp"

#include <algorithm>
#include <cassert>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>

#include <cblas.h>

namespace pkifmm {

namespace {

// out[o] = sign[o] * in[perm[o]]
struct SignedPerm {
    std::array<int, 3> perm{0, 1, 2};
    std::array<int, 3> sign{1, 1, 1};

    Vec3i apply(const Vec3i &v) const {
        return Vec3i(sign[0] * v[perm[0]], sign[1] * v[perm[1]], sign[2] * v[perm[2]]);
    }
    SignedPerm inverse() const {
        SignedPerm inv;
        for (int o = 0; o < 3; o++) {
            inv.perm[perm[o]] = o;
            inv.sign[perm[o]] = sign[o];
        }
        return inv;
    }
};

std::array<SignedPerm, 48> octahedral_group() {
    std::array<SignedPerm, 48> g;
    const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    int idx = 0;
    for (const auto &pm : perms)
        for (int s = 0; s < 8; s++) {
            g[idx].perm = {pm[0], pm[1], pm[2]};
            g[idx].sign = {(s & 1) ? -1 : 1, (s & 2) ? -1 : 1, (s & 4) ? -1 : 1};
            idx++;
        }
    return g;
}

const Vec3 kRootCenter(0.5, 0.5, 0.5);

int offset_key(const Vec3i &d) { return (d[0] + 3) * 49 + (d[1] + 3) * 7 + (d[2] + 3); }

} // namespace

struct KifmmOperators {
    KernelSpec kernel;
    int p = 0;
    int n = 0;
    std::vector<Vec3> inner_tmpl; // upward equivalent / downward check, root scale
    std::vector<Vec3> outer_tmpl; // upward check / downward equivalent, root scale
    SvdFactors a_up;              // K(outer, inner)
    SvdFactors a_dn;              // K(inner, outer)

    std::array<SignedPerm, 48> group;
    std::vector<std::vector<int>> sigma; // 48 x n: sigma[g][i] = index of g^-1 * u_i

    struct M2LRef {
        int cls = -1;
        int g = -1;
    };
    std::array<M2LRef, 343> m2l_ref{};
    std::vector<Vec3i> class_repr;

    mutable std::mutex mtx;
    mutable std::vector<std::unique_ptr<DenseMatrix>> m2l_cls;
    mutable std::array<std::unique_ptr<DenseMatrix>, 8> m2m, l2l;

    Vec3 child_center_canonical(int oct) const {
        return kRootCenter + Vec3((oct & 1) ? 0.25 : -0.25, (oct & 2) ? 0.25 : -0.25, (oct & 4) ? 0.25 : -0.25);
    }

    const DenseMatrix &m2l_class(int cls) const {
        std::lock_guard<std::mutex> lock(mtx);
        if (!m2l_cls[cls]) {
            std::vector<Vec3> shifted = inner_tmpl;
            const Vec3i d = class_repr[cls];
            for (auto &pt : shifted) pt += Vec3(d[0], d[1], d[2]);
            m2l_cls[cls] = std::make_unique<DenseMatrix>(kernel_block(kernel, inner_tmpl, shifted));
        }
        return *m2l_cls[cls];
    }

    const DenseMatrix &m2m_mat(int oct) const {
        std::lock_guard<std::mutex> lock(mtx);
        if (!m2m[oct])
            m2m[oct] = std::make_unique<DenseMatrix>(
                kernel_block(kernel, outer_tmpl, surface_points(p, child_center_canonical(oct), 0.5 * kInnerSurfaceScale)));
        return *m2m[oct];
    }

    const DenseMatrix &l2l_mat(int oct) const {
        std::lock_guard<std::mutex> lock(mtx);
        if (!l2l[oct])
            l2l[oct] = std::make_unique<DenseMatrix>(
                kernel_block(kernel, surface_points(p, child_center_canonical(oct), 0.5 * kInnerSurfaceScale), outer_tmpl));
        return *l2l[oct];
    }

    /// q += scale * M2L[d] * phi, using the canonical class matrix and the
    /// symmetry transform q_i = g (M psi)_{sigma(i)}, psi_{sigma(j)} = g^T phi_j.
    void apply_m2l(const Vec3i &d, std::span<const double> phi, std::span<double> q, double scale) const {
        const M2LRef ref = m2l_ref[offset_key(d)];
        if (ref.cls < 0) throw std::logic_error("apply_m2l: offset outside the well-separated range");
        const DenseMatrix &m = m2l_class(ref.cls);
        const SignedPerm &g = group[ref.g];
        const auto &sg = sigma[ref.g];
        const int ks = kernel.ks;
        std::vector<double> psi(phi.size()), w(q.size());
        if (ks == 1) {
            for (int j = 0; j < n; j++) psi[sg[j]] = phi[j];
            matvec(m, psi.data(), w.data());
            for (int i = 0; i < n; i++) q[i] += scale * w[sg[i]];
        } else {
            for (int j = 0; j < n; j++)
                for (int o = 0; o < 3; o++) psi[3 * sg[j] + g.perm[o]] = g.sign[o] * phi[3 * j + o];
            matvec(m, psi.data(), w.data());
            for (int i = 0; i < n; i++)
                for (int o = 0; o < 3; o++) q[3 * i + o] += scale * g.sign[o] * w[3 * sg[i] + g.perm[o]];
        }
    }

    /// Batched form over many (target, source) pairs sharing one offset: the
    /// class matrix streams through a single GEMM per chunk instead of one
    /// matrix-vector product per pair.
    void apply_m2l_batch(const Vec3i &d, std::span<const std::pair<int, int>> pairs,
                         const std::vector<std::vector<double>> &phi_up, std::vector<std::vector<double>> &q_dn,
                         double scale) const {
        const M2LRef ref = m2l_ref[offset_key(d)];
        if (ref.cls < 0) throw std::logic_error("apply_m2l_batch: offset outside the well-separated range");
        const DenseMatrix &m = m2l_class(ref.cls);
        const SignedPerm &g = group[ref.g];
        const auto &sg = sigma[ref.g];
        const int ks = kernel.ks, kt = kernel.kt;
        const int cols_in = ks * n, cols_out = kt * n;
        constexpr int kChunk = 256;
        std::vector<double> psi_t, w_t;
        for (size_t base = 0; base < pairs.size(); base += kChunk) {
            const int c = static_cast<int>(std::min<size_t>(kChunk, pairs.size() - base));
            psi_t.assign(static_cast<size_t>(c) * cols_in, 0.0);
            for (int k = 0; k < c; k++) {
                const auto &phi = phi_up[pairs[base + k].second];
                double *row = &psi_t[static_cast<size_t>(k) * cols_in];
                if (ks == 1) {
                    for (int j = 0; j < n; j++) row[sg[j]] = phi[j];
                } else {
                    for (int j = 0; j < n; j++)
                        for (int o = 0; o < 3; o++) row[3 * sg[j] + g.perm[o]] = g.sign[o] * phi[3 * j + o];
                }
            }
            w_t.assign(static_cast<size_t>(c) * cols_out, 0.0);
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, c, cols_out, cols_in, 1.0, psi_t.data(), cols_in,
                        m.data.data(), m.cols, 0.0, w_t.data(), cols_out);
            for (int k = 0; k < c; k++) {
                auto &q = q_dn[pairs[base + k].first];
                if (q.empty()) q.assign(cols_out, 0.0);
                const double *w = &w_t[static_cast<size_t>(k) * cols_out];
                if (ks == 1) {
                    for (int i = 0; i < n; i++) q[i] += scale * w[sg[i]];
                } else {
                    for (int i = 0; i < n; i++)
                        for (int o = 0; o < 3; o++) q[3 * i + o] += scale * g.sign[o] * w[3 * sg[i] + g.perm[o]];
                }
            }
        }
    }
};

namespace {

std::shared_ptr<const KifmmOperators> build_operators(const KernelSpec &kernel, int p) {
    auto ops = std::make_shared<KifmmOperators>();
    ops->kernel = kernel;
    ops->p = p;
    ops->n = surface_point_count(p);
    ops->inner_tmpl = surface_points(p, kRootCenter, kInnerSurfaceScale);
    ops->outer_tmpl = surface_points(p, kRootCenter, kOuterSurfaceScale);
    ops->a_up = svd(kernel_block(kernel, ops->outer_tmpl, ops->inner_tmpl));
    ops->a_dn = svd(kernel_block(kernel, ops->inner_tmpl, ops->outer_tmpl));
    ops->group = octahedral_group();

    // exact index maps through the integer surface grid
    const auto grid = surface_grid_indices(p);
    std::vector<int> lookup(static_cast<size_t>(p) * p * p, -1);
    auto key = [p](const Vec3i &t) { return (t[0] * p + t[1]) * p + t[2]; };
    for (int i = 0; i < ops->n; i++) lookup[key(grid[i])] = i;
    auto transform_grid = [p](const SignedPerm &g, const Vec3i &t) {
        Vec3i out;
        for (int o = 0; o < 3; o++) {
            const int v = t[g.perm[o]];
            out[o] = (g.sign[o] > 0) ? v : (p - 1 - v);
        }
        return out;
    };
    ops->sigma.assign(48, std::vector<int>(ops->n));
    for (int e = 0; e < 48; e++) {
        const SignedPerm inv = ops->group[e].inverse();
        for (int i = 0; i < ops->n; i++) {
            const int j = lookup[key(transform_grid(inv, grid[i]))];
            assert(j >= 0);
            ops->sigma[e][i] = j;
        }
    }

    // canonical classes over the well-separated offsets
    std::map<std::array<int, 3>, int> cls_of;
    for (int dx = -3; dx <= 3; dx++)
        for (int dy = -3; dy <= 3; dy++)
            for (int dz = -3; dz <= 3; dz++) {
                const Vec3i d(dx, dy, dz);
                if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) < 2) continue;
                std::array<int, 3> canon{std::abs(dx), std::abs(dy), std::abs(dz)};
                std::sort(canon.begin(), canon.end(), std::greater<int>());
                auto [it, inserted] = cls_of.emplace(canon, static_cast<int>(ops->class_repr.size()));
                if (inserted) ops->class_repr.emplace_back(canon[0], canon[1], canon[2]);
                int ge = -1;
                for (int e = 0; e < 48; e++)
                    if (ops->group[e].apply(ops->class_repr[it->second]) == d) {
                        ge = e;
                        break;
                    }
                assert(ge >= 0);
                ops->m2l_ref[offset_key(d)] = {it->second, ge};
            }
    ops->m2l_cls.resize(ops->class_repr.size());
    return ops;
}

std::shared_ptr<const KifmmOperators> operators_registry(const KernelSpec &kernel, int p) {
    struct Entry {
        std::shared_ptr<const KifmmOperators> ops;
        uint64_t stamp = 0;
    };
    static std::map<std::pair<int, int>, Entry> cache;
    static std::mutex mtx;
    static uint64_t counter = 0;
    std::lock_guard<std::mutex> lock(mtx);
    const auto key = std::make_pair(static_cast<int>(kernel.type), p);
    auto it = cache.find(key);
    if (it == cache.end()) {
        while (cache.size() >= 3) {
            auto lru = std::min_element(cache.begin(), cache.end(),
                                        [](const auto &a, const auto &b) { return a.second.stamp < b.second.stamp; });
            cache.erase(lru);
        }
        it = cache.emplace(key, Entry{build_operators(kernel, p), 0}).first;
    }
    it->second.stamp = ++counter;
    return it->second.ops;
}

// summed root-level translation for image layers 2..ell
std::shared_ptr<const DenseMatrix> root_image_operator(const KernelSpec &kernel, int p, const PeriodicSetup &setup) {
    static std::map<std::string, std::shared_ptr<const DenseMatrix>> cache;
    static std::mutex mtx;
    std::ostringstream os;
    os << kernel.name() << '|' << p << '|' << int(setup.axes[0]) << int(setup.axes[1]) << int(setup.axes[2]) << '|'
       << setup.ell;
    std::lock_guard<std::mutex> lock(mtx);
    auto it = cache.find(os.str());
    if (it != cache.end()) return it->second;

    const auto inner = surface_points(p, kRootCenter, kInnerSurfaceScale);
    const int n = surface_point_count(p);
    auto m = std::make_shared<DenseMatrix>(kernel.kt * n, kernel.ks * n);
    for (const Vec3i &d : image_offsets(setup, 2, setup.ell)) {
        std::vector<Vec3> shifted = inner;
        for (auto &pt : shifted) pt += Vec3(d[0], d[1], d[2]);
        const DenseMatrix part = kernel_block(kernel, inner, shifted);
        for (size_t i = 0; i < m->data.size(); i++) m->data[i] += part.data[i];
    }
    cache.emplace(os.str(), m);
    return m;
}

double seconds_since(const std::chrono::steady_clock::time_point &t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

std::shared_ptr<const KifmmOperators> kifmm_operators(const KernelSpec &kernel, int p) {
    return operators_registry(kernel, p);
}

const SvdFactors &downward_factors(const KifmmOperators &ops) { return ops.a_dn; }
const SvdFactors &upward_factors(const KifmmOperators &ops) { return ops.a_up; }

// ---------------------------------------------------------------------------
// tree construction

FmmTree::FmmTree(std::vector<Vec3> sources, std::vector<Vec3> targets, int leaf_capacity, int max_depth)
    : sources_(std::move(sources)), targets_(std::move(targets)), leaf_capacity_(leaf_capacity),
      max_depth_(max_depth) {
    if (leaf_capacity_ < 1) throw std::invalid_argument("FmmTree: leaf capacity must be positive");
    std::string offenders;
    int bad = 0;
    auto check_points = [&](const std::vector<Vec3> &pts, const char *what) {
        for (size_t i = 0; i < pts.size(); i++) {
            const Vec3 &x = pts[i];
            if (x[0] < 0 || x[0] >= 1 || x[1] < 0 || x[1] >= 1 || x[2] < 0 || x[2] >= 1) {
                if (bad < 8) {
                    std::ostringstream os;
                    os << ' ' << what << '[' << i << "]=(" << x[0] << ',' << x[1] << ',' << x[2] << ')';
                    offenders += os.str();
                }
                bad++;
            }
        }
    };
    check_points(sources_, "source");
    check_points(targets_, "target");
    if (bad > 0)
        throw std::invalid_argument("FmmTree: " + std::to_string(bad) + " points outside [0,1)^3:" + offenders);

    Box root;
    root.src.resize(sources_.size());
    root.trg.resize(targets_.size());
    for (size_t i = 0; i < sources_.size(); i++) root.src[i] = static_cast<int>(i);
    for (size_t i = 0; i < targets_.size(); i++) root.trg[i] = static_cast<int>(i);
    boxes_.push_back(std::move(root));

    for (size_t bi = 0; bi < boxes_.size(); bi++) {
        if (static_cast<int>(boxes_[bi].src.size()) > leaf_capacity_ ||
            static_cast<int>(boxes_[bi].trg.size()) > leaf_capacity_) {
            if (boxes_[bi].level >= max_depth_)
                throw std::runtime_error("FmmTree: leaf over capacity at maximum depth " + std::to_string(max_depth_) +
                                         " (duplicate point pathology)");
            split(static_cast<int>(bi));
        }
    }
    depth_ = 0;
    for (const Box &b : boxes_) depth_ = std::max(depth_, b.level);
    level_boxes_.assign(depth_ + 1, {});
    for (size_t i = 0; i < boxes_.size(); i++) level_boxes_[boxes_[i].level].push_back(static_cast<int>(i));
    for (size_t i = boxes_.size(); i-- > 0;) {
        Box &b = boxes_[i];
        if (b.leaf) {
            b.src_subtree = static_cast<int>(b.src.size());
            b.trg_subtree = static_cast<int>(b.trg.size());
        }
        if (b.parent >= 0) {
            boxes_[b.parent].src_subtree += b.src_subtree;
            boxes_[b.parent].trg_subtree += b.trg_subtree;
        }
    }
}

Vec3 FmmTree::box_center(const Box &b) const {
    const double h = std::ldexp(1.0, -b.level);
    return Vec3((b.cell[0] + 0.5) * h, (b.cell[1] + 0.5) * h, (b.cell[2] + 0.5) * h);
}

void FmmTree::split(int bi) {
    const Vec3 c = box_center(boxes_[bi]);
    std::array<std::vector<int>, 8> src, trg;
    for (int idx : boxes_[bi].src) {
        const Vec3 &x = sources_[idx];
        src[(x[0] >= c[0] ? 1 : 0) | (x[1] >= c[1] ? 2 : 0) | (x[2] >= c[2] ? 4 : 0)].push_back(idx);
    }
    for (int idx : boxes_[bi].trg) {
        const Vec3 &x = targets_[idx];
        trg[(x[0] >= c[0] ? 1 : 0) | (x[1] >= c[1] ? 2 : 0) | (x[2] >= c[2] ? 4 : 0)].push_back(idx);
    }
    boxes_[bi].leaf = false;
    boxes_[bi].src.clear();
    boxes_[bi].trg.clear();
    for (int o = 0; o < 8; o++) {
        if (src[o].empty() && trg[o].empty()) continue;
        Box child;
        child.level = boxes_[bi].level + 1;
        child.cell = {2 * boxes_[bi].cell[0] + ((o & 1) ? 1 : 0), 2 * boxes_[bi].cell[1] + ((o & 2) ? 1 : 0),
                      2 * boxes_[bi].cell[2] + ((o & 4) ? 1 : 0)};
        child.parent = bi;
        child.src = std::move(src[o]);
        child.trg = std::move(trg[o]);
        boxes_[bi].child[o] = static_cast<int>(boxes_.size());
        boxes_.push_back(std::move(child));
    }
}

size_t FmmTree::leaf_count() const {
    size_t c = 0;
    for (const Box &b : boxes_) c += b.leaf ? 1 : 0;
    return c;
}

uint64_t FmmTree::structure_hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
        h ^= v;
        h *= 1099511628211ull;
    };
    for (const Box &b : boxes_) {
        mix(b.level);
        mix(b.cell[0]);
        mix(b.cell[1]);
        mix(b.cell[2]);
        mix(b.leaf ? 1 : 0);
        for (int i : b.src) mix(static_cast<uint64_t>(i) + 0x9e3779b97f4a7c15ull);
        for (int i : b.trg) mix(static_cast<uint64_t>(i) + 0x517cc1b727220a95ull);
    }
    return h;
}

// ---------------------------------------------------------------------------
// interaction lists: dual traversal of the tree against itself shifted by an
// integer image offset. Pairs enter adjacent; non-adjacent splits emit V
// (same level), W (finer source next to a target leaf) or X (coarser source
// leaf next to a finer target box). Leaf-leaf adjacency lands in U.

namespace {
bool boxes_adjacent(const std::array<int, 3> &bc, int bl, const std::array<int, 3> &cc, int cl, const Vec3i &shift) {
    const int lf = std::max(bl, cl);
    for (int a = 0; a < 3; a++) {
        const long lob = static_cast<long>(bc[a]) << (lf - bl);
        const long hib = ((static_cast<long>(bc[a]) + 1) << (lf - bl)) - 1;
        const long sc = static_cast<long>(cc[a]) + (static_cast<long>(shift[a]) << cl);
        const long loc = sc << (lf - cl);
        const long hic = ((sc + 1) << (lf - cl)) - 1;
        if (loc > hib + 1 || lob > hic + 1) return false;
    }
    return true;
}
} // namespace

void FmmTree::traverse(int bi, int ci, const Vec3i &shift) {
    const Box &b = boxes_[bi];
    const Box &c = boxes_[ci];
    const Vec3 pshift(shift[0], shift[1], shift[2]);
    if (b.leaf && c.leaf) {
        lists_.u[bi].emplace_back(ci, pshift);
        return;
    }
    if (b.leaf) { // c internal, same level or finer: descend the source side
        for (int o = 0; o < 8; o++) {
            const int cc = c.child[o];
            if (cc < 0) continue;
            if (boxes_adjacent(b.cell, b.level, boxes_[cc].cell, boxes_[cc].level, shift))
                traverse(bi, cc, shift);
            else
                lists_.w[bi].emplace_back(cc, pshift);
        }
        return;
    }
    if (c.leaf) { // b internal: descend the target side
        for (int o = 0; o < 8; o++) {
            const int bb = b.child[o];
            if (bb < 0) continue;
            if (boxes_adjacent(boxes_[bb].cell, boxes_[bb].level, c.cell, c.level, shift))
                traverse(bb, ci, shift);
            else
                lists_.x[bb].emplace_back(ci, pshift);
        }
        return;
    }
    assert(b.level == c.level);
    for (int ob = 0; ob < 8; ob++) {
        const int bb = b.child[ob];
        if (bb < 0) continue;
        for (int oc = 0; oc < 8; oc++) {
            const int cc = c.child[oc];
            if (cc < 0) continue;
            const Box &cb = boxes_[bb];
            const Box &cs = boxes_[cc];
            if (boxes_adjacent(cb.cell, cb.level, cs.cell, cs.level, shift)) {
                traverse(bb, cc, shift);
            } else {
                const int lvl = cb.level;
                const Vec3i d(cs.cell[0] + (shift[0] << lvl) - cb.cell[0], cs.cell[1] + (shift[1] << lvl) - cb.cell[1],
                              cs.cell[2] + (shift[2] << lvl) - cb.cell[2]);
                assert(std::max({std::abs(d[0]), std::abs(d[1]), std::abs(d[2])}) <= 3);
                lists_.v[bb].emplace_back(cc, d);
            }
        }
    }
}

void FmmTree::build_lists(const PeriodicSetup *setup) {
    std::vector<Vec3i> wraps;
    if (setup && setup->periodicity != Periodicity::none && setup->ell >= 1)
        wraps = image_offsets(*setup, 1, 1);
    if (lists_.built && lists_.wraps == wraps) return;
    lists_ = Lists{};
    lists_.wraps = wraps;
    const size_t nb = boxes_.size();
    lists_.u.assign(nb, {});
    lists_.v.assign(nb, {});
    lists_.w.assign(nb, {});
    lists_.x.assign(nb, {});
    traverse(0, 0, Vec3i::Zero());
    for (const Vec3i &d : wraps) traverse(0, 0, d);
    lists_.built = true;
}

// ---------------------------------------------------------------------------
// evaluation passes

std::vector<double> FmmTree::run(const KernelSpec &kernel, int p, std::span<const double> strengths,
                                 const PeriodicSetup *setup) {
    const int ks = kernel.ks, kt = kernel.kt;
    const int n = surface_point_count(p);
    if (strengths.size() != sources_.size() * static_cast<size_t>(ks))
        throw std::invalid_argument("FmmTree: strengths length does not match sources");
    const auto ops = kifmm_operators(kernel, p);
    build_lists(setup);

    const size_t nb = boxes_.size();
    std::vector<std::vector<double>> phi_up(nb), phi_dn(nb);
    std::vector<double> scratch_q(static_cast<size_t>(kt) * n);
    std::vector<Vec3> pt_buf;
    std::vector<double> str_buf;

    auto gather_sources = [&](const Box &b) {
        pt_buf.clear();
        str_buf.clear();
        for (int idx : b.src) {
            pt_buf.push_back(sources_[idx]);
            for (int a = 0; a < ks; a++) str_buf.push_back(strengths[static_cast<size_t>(idx) * ks + a]);
        }
    };

    // upward pass: S2M at leaves, M2M up
    for (int lvl = depth_; lvl >= 0; lvl--) {
        for (int bi : level_boxes_[lvl]) {
            Box &b = boxes_[bi];
            if (b.src_subtree == 0) continue;
            const double scale = std::ldexp(1.0, lvl);
            std::fill(scratch_q.begin(), scratch_q.end(), 0.0);
            if (b.leaf) {
                gather_sources(b);
                const auto check = surface_points(p, box_center(b), kOuterSurfaceScale / scale);
                kernel_block_apply(kernel, check, pt_buf, Vec3::Zero(), str_buf, scratch_q);
            } else {
                for (int o = 0; o < 8; o++) {
                    const int ci = b.child[o];
                    if (ci < 0 || boxes_[ci].src_subtree == 0) continue;
                    matvec(ops->m2m_mat(o), phi_up[ci].data(), scratch_q.data(), scale, 1.0);
                }
            }
            phi_up[bi] = pinv_apply(ops->a_up, scratch_q);
            for (double &v : phi_up[bi]) v /= scale;
        }
    }

    std::vector<double> out(static_cast<size_t>(kt) * targets_.size(), 0.0);

    // downward pass: V (M2L) and X (S2L) into check potentials, L2L down.
    // V interactions are grouped by cell offset per level so each translation
    // matrix streams through one GEMM.
    std::vector<std::vector<double>> q_dn(nb);
    for (int lvl = 0; lvl <= depth_; lvl++) {
        const double scale = std::ldexp(1.0, lvl);
        std::map<int, std::vector<std::pair<int, int>>> v_groups;
        for (int bi : level_boxes_[lvl]) {
            if (boxes_[bi].trg_subtree == 0) continue;
            for (const auto &[ci, d] : lists_.v[bi]) {
                if (boxes_[ci].src_subtree == 0) continue;
                v_groups[offset_key(d)].push_back({bi, ci});
            }
        }
        for (const auto &[key, pairs] : v_groups) {
            const Vec3i d(key / 49 - 3, (key / 7) % 7 - 3, key % 7 - 3);
            ops->apply_m2l_batch(d, pairs, phi_up, q_dn, scale);
        }
        for (int bi : level_boxes_[lvl]) {
            Box &b = boxes_[bi];
            if (b.trg_subtree == 0) continue;
            bool any = !q_dn[bi].empty();
            if (q_dn[bi].empty()) q_dn[bi].assign(static_cast<size_t>(kt) * n, 0.0);
            if (!lists_.x[bi].empty()) {
                const auto dn_check = surface_points(p, box_center(b), kInnerSurfaceScale / scale);
                for (const auto &[ci, shift] : lists_.x[bi]) {
                    if (boxes_[ci].src_subtree == 0) continue;
                    gather_sources(boxes_[ci]);
                    kernel_block_apply(kernel, dn_check, pt_buf, shift, str_buf, q_dn[bi]);
                    any = true;
                }
            }
            if (b.parent >= 0 && !phi_dn[b.parent].empty()) {
                matvec(ops->l2l_mat((b.cell[0] & 1) | ((b.cell[1] & 1) << 1) | ((b.cell[2] & 1) << 2)),
                       phi_dn[b.parent].data(), q_dn[bi].data(), scale * 0.5, 1.0);
                any = true;
            }
            if (any) {
                phi_dn[bi] = pinv_apply(ops->a_dn, q_dn[bi]);
                for (double &v : phi_dn[bi]) v /= scale;
            }
            q_dn[bi].clear();
            q_dn[bi].shrink_to_fit();
        }
    }

    // leaf outputs: L2T, W (M2T), U (S2T)
    std::vector<double> leaf_out;
    std::vector<Vec3> trg_buf;
    for (int bi = 0; bi < static_cast<int>(nb); bi++) {
        const Box &b = boxes_[bi];
        if (!b.leaf || b.trg.empty()) continue;
        const double scale = std::ldexp(1.0, b.level);
        trg_buf.clear();
        for (int idx : b.trg) trg_buf.push_back(targets_[idx]);
        leaf_out.assign(static_cast<size_t>(kt) * trg_buf.size(), 0.0);

        if (!phi_dn[bi].empty()) {
            const auto dn_equiv = surface_points(p, box_center(b), kOuterSurfaceScale / scale);
            kernel_block_apply(kernel, trg_buf, dn_equiv, Vec3::Zero(), phi_dn[bi], leaf_out);
        }
        for (const auto &[ci, shift] : lists_.w[bi]) {
            if (boxes_[ci].src_subtree == 0) continue;
            const Box &c = boxes_[ci];
            const auto up_equiv = surface_points(p, box_center(c), kInnerSurfaceScale / std::ldexp(1.0, c.level));
            kernel_block_apply(kernel, trg_buf, up_equiv, shift, phi_up[ci], leaf_out);
        }
        for (const auto &[ci, shift] : lists_.u[bi]) {
            if (boxes_[ci].src.empty()) continue;
            gather_sources(boxes_[ci]);
            const bool self_copy = shift == Vec3::Zero();
            kernel_block_apply(kernel, trg_buf, pt_buf, shift, str_buf, leaf_out, self_copy);
        }
        for (size_t t = 0; t < b.trg.size(); t++)
            for (int a = 0; a < kt; a++)
                out[static_cast<size_t>(b.trg[t]) * kt + a] += leaf_out[t * kt + a];
    }

    // image layers 2..ell: summed root-level translation on the root upward
    // density, solved on the downward surfaces and evaluated at the targets
    if (setup && setup->periodicity != Periodicity::none && setup->ell >= 2 && boxes_[0].src_subtree > 0) {
        const auto m_img = root_image_operator(kernel, p, *setup);
        std::vector<double> q_img(static_cast<size_t>(kt) * n, 0.0);
        matvec(*m_img, phi_up[0].data(), q_img.data());
        EquivalentDensity dn;
        dn.role = EquivalentDensity::Role::downward;
        dn.values = pinv_apply(ops->a_dn, q_img);
        far_field_eval(kernel, p, dn, targets_, out);
    }

    state_.kernel = kernel;
    state_.p = p;
    state_.strengths.assign(strengths.begin(), strengths.end());
    state_.root_phi_up = phi_up[0];
    state_.valid = true;
    return out;
}

std::vector<double> FmmTree::eval_free_space(const KernelSpec &kernel, int p, std::span<const double> strengths) {
    return run(kernel, p, strengths, nullptr);
}

std::vector<double> FmmTree::eval_near_field(const KernelSpec &kernel, int p, std::span<const double> strengths,
                                             const PeriodicSetup &setup) {
    return run(kernel, p, strengths, &setup);
}

EquivalentDensity FmmTree::root_upward_density(const KernelSpec &kernel, int p, std::span<const double> strengths) {
    const bool stale = !state_.valid || !(state_.kernel == kernel) || state_.p != p ||
                       !std::equal(state_.strengths.begin(), state_.strengths.end(), strengths.begin(),
                                   strengths.end());
    if (stale) run(kernel, p, strengths, nullptr);
    EquivalentDensity d;
    d.role = EquivalentDensity::Role::upward;
    d.values = state_.root_phi_up;
    if (d.values.empty()) d.values.assign(static_cast<size_t>(kernel.ks) * surface_point_count(p), 0.0);
    return d;
}

EquivalentDensity direct_root_upward_density(const KernelSpec &kernel, int p, std::span<const Vec3> sources,
                                             std::span<const double> strengths) {
    const auto ops = kifmm_operators(kernel, p);
    const int n = surface_point_count(p);
    std::vector<double> q(static_cast<size_t>(kernel.kt) * n, 0.0);
    kernel_block_apply(kernel, ops->outer_tmpl, sources, Vec3::Zero(), strengths, q);
    EquivalentDensity d;
    d.role = EquivalentDensity::Role::upward;
    d.values = pinv_apply(ops->a_up, q);
    return d;
}

// ---------------------------------------------------------------------------

EvalResult evaluate(const EvalRequest &request) {
    const KernelSpec &kernel = request.kernel;
    const int ks = kernel.ks, kt = kernel.kt;
    if (request.strengths.size() != request.sources.size() * static_cast<size_t>(ks))
        throw std::invalid_argument("evaluate: strengths length does not match sources");
    const bool periodic = request.setup.periodicity != Periodicity::none;
    if (periodic) {
        if (!request.op) throw ConfigError("evaluate: a periodizing operator is required for periodic runs");
        const PeriodizingOperator &op = *request.op;
        if (!(op.kernel == kernel) || op.p != request.p || !(op.setup == request.setup))
            throw ConfigError("evaluate: operator provenance (kernel/p/ell/periodicity) does not match the request");
    }

    EvalResult result;
    result.compat = check_compatibility(kernel, request.setup, request.strengths);
    if (!result.compat.ok && !request.force)
        throw ConfigError("evaluate: compatibility violation (" + result.compat.violated + ")");

    result.potentials.assign(static_cast<size_t>(kt) * request.targets.size(), 0.0);
    EquivalentDensity up;

    if (request.mode == EvalMode::direct) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto offsets =
            periodic ? image_offsets(request.setup, 0, request.setup.ell) : std::vector<Vec3i>{Vec3i::Zero()};
        for (const Vec3i &d : offsets) {
            const Vec3 shift(d[0], d[1], d[2]);
            kernel_block_apply(kernel, request.targets, request.sources, shift, request.strengths, result.potentials,
                               d == Vec3i::Zero());
        }
        up = direct_root_upward_density(kernel, request.p, request.sources, request.strengths);
        result.timings.near = seconds_since(t0);
    } else {
        const auto t0 = std::chrono::steady_clock::now();
        FmmTree tree(request.sources, request.targets, request.leaf_capacity);
        result.timings.tree = seconds_since(t0);
        const auto t1 = std::chrono::steady_clock::now();
        result.potentials = periodic ? tree.eval_near_field(kernel, request.p, request.strengths, request.setup)
                                     : tree.eval_free_space(kernel, request.p, request.strengths);
        up = tree.root_upward_density(kernel, request.p, request.strengths);
        result.timings.near = seconds_since(t1);
    }

    if (periodic) {
        const auto t2 = std::chrono::steady_clock::now();
        const EquivalentDensity dn = apply_m2l(*request.op, up);
        result.timings.m2l_apply = seconds_since(t2);
        const auto t3 = std::chrono::steady_clock::now();
        far_field_eval(kernel, request.p, dn, request.targets, result.potentials);
        result.timings.far = seconds_since(t3);
    }
    return result;
}

} // namespace pkifmm
