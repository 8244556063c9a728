#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "garnet/data.hpp"
#include "test_util.hpp"

using namespace garnet;
using namespace garnet::test;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("data");

namespace {

// Independent BFS over the 6-neighbourhood, used as the connectivity oracle.
bool oracle_connected(const BinaryGrid& g) {
    std::vector<int> occ;
    for (int i = 0; i < static_cast<int>(g.cells.size()); ++i)
        if (g.cells[static_cast<size_t>(i)]) occ.push_back(i);
    if (occ.empty()) return false;
    std::vector<char> seen(g.cells.size(), 0);
    std::vector<int> queue{occ[0]};
    seen[static_cast<size_t>(occ[0])] = 1;
    size_t head = 0;
    int found = 0;
    while (head < queue.size()) {
        const int cur = queue[head++];
        ++found;
        const int x = cur % g.w, y = (cur / g.w) % g.h, z = cur / (g.w * g.h);
        auto push = [&](int nx, int ny, int nz) {
            if (nx < 0 || nx >= g.w || ny < 0 || ny >= g.h || nz < 0 || nz >= g.d) return;
            const int ni = (nz * g.h + ny) * g.w + nx;
            if (g.cells[static_cast<size_t>(ni)] && !seen[static_cast<size_t>(ni)]) {
                seen[static_cast<size_t>(ni)] = 1;
                queue.push_back(ni);
            }
        };
        push(x + 1, y, z);
        push(x - 1, y, z);
        push(x, y + 1, z);
        push(x, y - 1, z);
        push(x, y, z + 1);
        push(x, y, z - 1);
    }
    return found == static_cast<int>(occ.size());
}

std::string temp_dir(const char* tag) {
    auto p = fs::temp_directory_path() / (std::string("garnet_data_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("generated objects are connected with at least 32 cells") {
    for (uint64_t seed = 0; seed < 12; ++seed) {
        Rng rng(seed);
        BinaryGrid g = generate_object_grid(rng);
        CHECK(g.count_occupied() >= 32);
        CHECK(g.count_occupied() <= 32 * 32 * 32);
        CHECK(oracle_connected(g));
    }
    Rng a(7), b(7);
    CHECK(generate_object_grid(a) == generate_object_grid(b));
}

TEST_CASE("rendering an empty grid yields all-zero images") {
    BinaryGrid g;
    g.d = g.h = g.w = 32;
    g.cells.assign(static_cast<size_t>(g.size()), 0);
    Tensor img = render_view(g, 0.7, 0.3, 32);
    for (double v : img.data()) CHECK(v == 0.0);
}

TEST_CASE("identical viewpoints produce identical images") {
    Rng rng(5);
    BinaryGrid g = generate_object_grid(rng);
    Tensor a = render_view(g, 1.1, -0.4, 32);
    Tensor b = render_view(g, 1.1, -0.4, 32);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
    for (double v : a.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("a center voxel projects exactly where the camera model predicts") {
    BinaryGrid g;
    g.d = g.h = g.w = 32;
    g.cells.assign(static_cast<size_t>(g.size()), 0);
    g.cells[static_cast<size_t>((16 * 32 + 16) * 32 + 16)] = 1;
    const int size = 32;
    Tensor img = render_view(g, 0.0, 0.0, size);

    // oracle: with az = el = 0 the rays run along -x at (y, z) =
    // (16 + u, 16 + v); the voxel spans [16,17) on both axes
    int hits = 0;
    for (int py = 0; py < size; ++py)
        for (int px = 0; px < size; ++px) {
            const double u = (px + 0.5 - size / 2.0) * 50.0 / size;
            const double v = (py + 0.5 - size / 2.0) * 50.0 / size;
            const bool expect = (16.0 + u >= 16.0 && 16.0 + u < 17.0) && (16.0 + v >= 16.0 && 16.0 + v < 17.0);
            const double sil = img.at(static_cast<int64_t>(py) * size + px);
            CAPTURE(py);
            CAPTURE(px);
            CHECK((sil > 0.0) == expect);
            hits += sil > 0.0 ? 1 : 0;
        }
    CHECK(hits > 0);
    // the hit sits at the image center
    CHECK(img.at(16 * 32 + 16) > 0.0);
}

TEST_CASE("voxel file round trip is bit exact with the documented size") {
    const std::string dir = temp_dir("vox");
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        BinaryGrid g;
        g.d = g.h = g.w = 32;
        g.cells.resize(static_cast<size_t>(g.size()));
        for (auto& c : g.cells) c = rng.uniform_real() < 0.5 ? 1 : 0;
        const std::string path = dir + "/grid.gvox";
        write_voxel(path, g);
        CHECK(fs::file_size(path) == 5 + 6 + 4096);
        CHECK(read_voxel(path) == g);
    }
}

TEST_CASE("corrupted voxel magic raises a format error, no partial grid") {
    const std::string dir = temp_dir("voxbad");
    BinaryGrid g;
    g.d = g.h = g.w = 4;
    g.cells.assign(64, 1);
    const std::string path = dir + "/bad.gvox";
    write_voxel(path, g);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.put('Z');
    }
    CHECK_THROWS_AS(read_voxel(path), format_error);

    // truncation also reports a format error
    const auto bytes = slurp(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), 8);
    out.close();
    CHECK_THROWS_AS(read_voxel(path), format_error);
}

TEST_CASE("view image file round trip") {
    const std::string dir = temp_dir("img");
    Rng rng(13);
    std::vector<double> px(3 * 32 * 32);
    for (double& v : px) v = static_cast<float>(rng.uniform_real()); // f32-representable
    Tensor img = Tensor::from_data({3, 32, 32}, px);
    const std::string path = dir + "/v.gimg";
    write_view_image(path, img);
    Tensor back = read_view_image(path);
    REQUIRE(back.shape() == img.shape());
    for (int64_t i = 0; i < img.numel(); ++i) CHECK(back.at(i) == img.at(i));
}

TEST_CASE("dataset build: splits, determinism, loadability") {
    const std::string dir_a = temp_dir("ds_a");
    const std::string dir_b = temp_dir("ds_b");
    Manifest ma = build_dataset(10, 3, 77, dir_a, 32);
    Manifest mb = build_dataset(10, 3, 77, dir_b, 32);
    REQUIRE(ma.records.size() == 10);

    // same seed: byte-identical artifacts
    for (const ManifestRecord& r : ma.records) {
        CHECK(slurp(dir_a + "/" + r.gt_path) == slurp(dir_b + "/" + r.gt_path));
        CHECK(slurp(dir_a + "/" + r.view_dir + "/view_000.gimg") ==
              slurp(dir_b + "/" + r.view_dir + "/view_000.gimg"));
    }

    Manifest split = split_dataset(ma, 0.2, 5);
    CHECK(split.with_split("test").size() == 2);
    CHECK(split.with_split("train").size() == 8);

    Manifest again = split_dataset(ma, 0.2, 5);
    for (size_t i = 0; i < split.records.size(); ++i) CHECK(split.records[i].split == again.records[i].split);

    // every record loads and parses
    for (const ManifestRecord& r : split.records) {
        LoadedObject obj = load_object(split, r);
        CHECK(obj.views.size() == 3);
        CHECK(obj.gt.count_occupied() >= 32);
        for (const Tensor& v : obj.views) CHECK(v.shape() == Shape{3, 32, 32});
    }

    // manifest round trip
    split.save(dir_a + "/manifest.tsv");
    Manifest loaded = Manifest::load(dir_a + "/manifest.tsv");
    REQUIRE(loaded.records.size() == split.records.size());
    for (size_t i = 0; i < loaded.records.size(); ++i) {
        CHECK(loaded.records[i].id == split.records[i].id);
        CHECK(loaded.records[i].split == split.records[i].split);
    }

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("viewpoint metadata stays outside the model-facing loader") {
    const std::string dir = temp_dir("meta");
    Manifest m = build_dataset(2, 4, 99, dir, 32);
    LoadedObject obj = load_object(m, m.records[0]);
    // the model-facing object carries pixels and ground truth only; the
    // viewpoint record lives behind a separate oracle loader
    std::vector<ViewMeta> meta = load_view_meta(m, m.records[0]);
    CHECK(meta.size() == obj.views.size());
    for (const ViewMeta& v : meta) {
        CHECK(v.azimuth >= 0.0);
        CHECK(v.azimuth < 2.0 * M_PI);
        CHECK(std::fabs(v.elevation) <= 1.2);
    }
    // rendering from the stored viewpoint reproduces the stored image
    LoadedObject again = load_object(m, m.records[0]);
    Tensor re = render_view(obj.gt, meta[0].azimuth, meta[0].elevation, 32);
    for (int64_t i = 0; i < re.numel(); ++i)
        CHECK(static_cast<float>(re.at(i)) == doctest::Approx(again.views[0].at(i)).epsilon(1e-7));
    fs::remove_all(dir);
}

TEST_CASE("dataset contracts") {
    CHECK_THROWS_AS(build_dataset(1, 3, 1, "/tmp/garnet_never"), contract_error);
    Rng rng(1);
    BinaryGrid g = generate_object_grid(rng);
    CHECK_THROWS_AS(render_views(g, 0, rng, 32), contract_error);
    CHECK_THROWS_AS(render_view(g, 0, 0, 7), contract_error);
}

TEST_SUITE_END();
