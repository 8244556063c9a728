#include "garnet/losses.hpp"

#include <array>
#include <cmath>
#include <unordered_set>

namespace garnet {

namespace {

constexpr double kProbClamp = 1e-7;
constexpr double kDenomEps = 1e-8;

void require_prob_pair(const Tensor& p, const Tensor& gt, const char* who) {
    if (p.shape() != gt.shape())
        throw contract_error(std::string(who) + ": shape mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(gt.shape()));
    for (double v : gt.data())
        if (v != 0.0 && v != 1.0) throw contract_error(std::string(who) + ": ground truth must be binary");
}

} // namespace

Tensor bce_loss(const Tensor& p, const Tensor& gt) {
    require_prob_pair(p, gt, "bce_loss");
    Tensor pc = clamp(p, kProbClamp, 1.0 - kProbClamp);
    Tensor one_minus_gt = add_const(scale(gt, -1.0), 1.0);
    Tensor one_minus_pc = add_const(scale(pc, -1.0), 1.0);
    Tensor per_cell = add(mul(gt, log(pc)), mul(one_minus_gt, log(one_minus_pc)));
    return scale(reduce_mean(per_cell), -1.0);
}

Tensor recall_loss(const Tensor& p, const Tensor& gt) {
    require_prob_pair(p, gt, "recall_loss");
    double gt_sum = 0.0;
    for (double v : gt.data()) gt_sum += v;
    if (gt_sum == 0.0) throw contract_error("recall_loss: ground truth has no occupied cells");
    Tensor hit = reduce_sum(mul(p, gt));
    return add_const(scale(hit, -1.0 / (gt_sum + kDenomEps)), 1.0);
}

Tensor precision_loss(const Tensor& p, const Tensor& gt) {
    require_prob_pair(p, gt, "precision_loss");
    Tensor hit = reduce_sum(mul(p, gt));
    Tensor denom = add_const(reduce_sum(p), kDenomEps);
    return add_const(scale(div(hit, denom), -1.0), 1.0);
}

Tensor total_loss(const Tensor& coarse, const Tensor& fine, const Tensor& gt, const LossWeights& w,
                  LossPhase phase) {
    Tensor loss = add(scale(bce_loss(coarse, gt), w.alpha), scale(bce_loss(fine, gt), w.beta));
    if (phase == LossPhase::kFull) {
        loss = add(loss, scale(recall_loss(fine, gt), w.gamma));
        loss = add(loss, scale(precision_loss(fine, gt), w.mu));
    }
    return loss;
}

int64_t BinaryGrid::count_occupied() const {
    int64_t n = 0;
    for (uint8_t c : cells) n += c;
    return n;
}

BinaryGrid binarize(const Tensor& p, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw contract_error("binarize: threshold must lie in (0,1)");
    Shape s = p.shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3) throw contract_error("binarize: expected (D,H,W) or (1,D,H,W) probabilities");
    BinaryGrid g;
    g.d = s[0];
    g.h = s[1];
    g.w = s[2];
    g.cells.resize(static_cast<size_t>(g.size()));
    for (int64_t i = 0; i < g.size(); ++i) g.cells[static_cast<size_t>(i)] = p.at(i) > threshold ? 1 : 0;
    return g;
}

Tensor grid_to_tensor(const BinaryGrid& g, bool with_channel_dim) {
    std::vector<double> data(g.cells.begin(), g.cells.end());
    Shape shape = with_channel_dim ? Shape{1, g.d, g.h, g.w} : Shape{g.d, g.h, g.w};
    return Tensor::from_data(std::move(shape), std::move(data));
}

double iou(const BinaryGrid& a, const BinaryGrid& b) {
    if (a.d != b.d || a.h != b.h || a.w != b.w) throw contract_error("iou: grid shape mismatch");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.cells.size(); ++i) {
        inter += a.cells[i] & b.cells[i];
        uni += a.cells[i] | b.cells[i];
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

std::vector<int64_t> surface_cells(const BinaryGrid& g) {
    std::vector<int64_t> cells;
    for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x) {
                if (!g.at(z, y, x)) continue;
                const bool exposed = z == 0 || z == g.d - 1 || y == 0 || y == g.h - 1 || x == 0 ||
                                     x == g.w - 1 || !g.at(z - 1, y, x) || !g.at(z + 1, y, x) ||
                                     !g.at(z, y - 1, x) || !g.at(z, y + 1, x) || !g.at(z, y, x - 1) ||
                                     !g.at(z, y, x + 1);
                if (exposed) cells.push_back((static_cast<int64_t>(z) * g.h + y) * g.w + x);
            }
    return cells;
}

std::array<double, 3> cell_center(const BinaryGrid& g, int64_t idx) {
    const int x = static_cast<int>(idx % g.w);
    const int y = static_cast<int>((idx / g.w) % g.h);
    const int z = static_cast<int>(idx / (static_cast<int64_t>(g.w) * g.h));
    return {(z + 0.5) / g.d, (y + 0.5) / g.h, (x + 0.5) / g.w};
}

double surface_precision(const BinaryGrid& g, const std::vector<int64_t>& from,
                         const std::vector<int64_t>& to, double tau) {
    if (from.empty()) return 0.0;
    const double min_pitch = 1.0 / std::max(g.d, std::max(g.h, g.w));
    int64_t hits = 0;
    if (tau < min_pitch) {
        // no two distinct cell centers are this close: membership test suffices
        std::unordered_set<int64_t> target(to.begin(), to.end());
        for (int64_t c : from) hits += target.count(c) ? 1 : 0;
    } else {
        const double tau2 = tau * tau;
        for (int64_t cf : from) {
            const auto p = cell_center(g, cf);
            for (int64_t ct : to) {
                const auto q = cell_center(g, ct);
                const double dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
                if (dz * dz + dy * dy + dx * dx <= tau2) {
                    ++hits;
                    break;
                }
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(from.size());
}

} // namespace

double fscore_1pct(const BinaryGrid& a, const BinaryGrid& b, double tau) {
    if (a.d != b.d || a.h != b.h || a.w != b.w) throw contract_error("fscore: grid shape mismatch");
    const auto sa = surface_cells(a);
    const auto sb = surface_cells(b);
    const double precision = surface_precision(a, sa, sb, tau);
    const double recall = surface_precision(a, sb, sa, tau);
    return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

} // namespace garnet
