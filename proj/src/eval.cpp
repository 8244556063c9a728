#include "garnet/eval.hpp"

#include <atomic>
#include <fstream>
#include <map>
#include <thread>

#include "garnet/losses.hpp"

namespace garnet {

Predictor model_predictor(const Model& model) {
    return [&model](const std::vector<Tensor>& views) { return model.forward(views).refined; };
}

std::vector<EvalRecord> evaluate_split(const Manifest& manifest, const std::string& split,
                                       const Predictor& predictor, const std::vector<int>& view_counts,
                                       uint64_t seed, double threshold, int threads) {
    if (view_counts.empty()) throw contract_error("evaluate_split: no view counts requested");
    const auto records = manifest.with_split(split);
    if (records.empty()) throw contract_error("evaluate_split: split '" + split + "' is empty");

    std::vector<std::vector<EvalRecord>> per_object(records.size());
    Rng base = Rng(seed).stream("eval-views");

    auto process = [&](size_t i) {
        const LoadedObject obj = load_object(manifest, records[i]);
        Rng rng = base.stream(static_cast<uint64_t>(i));
        std::vector<int> perm(obj.views.size());
        for (size_t v = 0; v < perm.size(); ++v) perm[v] = static_cast<int>(v);
        rng.shuffle(perm);

        for (int n : view_counts) {
            if (n < 1 || static_cast<size_t>(n) > obj.views.size())
                throw contract_error("evaluate_split: object " + obj.id + " cannot supply " +
                                     std::to_string(n) + " views");
            std::vector<Tensor> views;
            views.reserve(static_cast<size_t>(n));
            for (int v = 0; v < n; ++v) views.push_back(obj.views[static_cast<size_t>(perm[v])]);
            Tensor probs = predictor(views);
            BinaryGrid pred = binarize(probs, threshold);
            per_object[i].push_back(
                {obj.id, n, iou(pred, obj.gt), fscore_1pct(pred, obj.gt)});
        }
    };

    const int workers = std::max(1, std::min<int>(threads, static_cast<int>(records.size())));
    if (workers <= 1) {
        for (size_t i = 0; i < records.size(); ++i) process(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < records.size(); i = next.fetch_add(1)) process(i);
            });
        for (std::thread& t : pool) t.join();
    }

    std::vector<EvalRecord> out;
    for (const auto& chunk : per_object) out.insert(out.end(), chunk.begin(), chunk.end());
    return out;
}

std::vector<EvalSummary> summarize(const std::vector<EvalRecord>& records) {
    std::map<int, EvalSummary> by_count;
    for (const EvalRecord& r : records) {
        EvalSummary& s = by_count[r.n_views];
        s.n_views = r.n_views;
        s.mean_iou += r.iou;
        s.mean_fscore += r.fscore;
        s.objects += 1;
    }
    std::vector<EvalSummary> out;
    for (auto& [n, s] : by_count) {
        s.mean_iou /= static_cast<double>(s.objects);
        s.mean_fscore /= static_cast<double>(s.objects);
        out.push_back(s);
    }
    return out;
}

void write_metrics(const std::string& path, const std::vector<EvalRecord>& records,
                   const std::vector<EvalSummary>& summaries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "# object_id, n_views, iou, fscore\n";
    for (const EvalRecord& r : records)
        out << r.object_id << ", " << r.n_views << ", " << r.iou << ", " << r.fscore << "\n";
    for (const EvalSummary& s : summaries)
        out << "# mean n=" << s.n_views << " iou=" << s.mean_iou << " fscore=" << s.mean_fscore
            << " objects=" << s.objects << "\n";
    if (!out) throw io_error("write failed: " + path);
}

} // namespace garnet
