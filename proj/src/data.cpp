#include "garnet/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace garnet {

namespace {

namespace fs = std::filesystem;
constexpr int kN = kGridExtent;
constexpr double kCamDistance = 50.0;
constexpr double kImageSpan = 50.0;

struct Vec3 {
    double x, y, z;
};

Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

Vec3 normalize(const Vec3& v) {
    const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
    return {v.x / n, v.y / n, v.z / n};
}

void fill_box(BinaryGrid& g, int cx, int cy, int cz, int ex, int ey, int ez) {
    const int x0 = std::clamp(cx - ex / 2, 0, kN), x1 = std::clamp(cx - ex / 2 + ex, 0, kN);
    const int y0 = std::clamp(cy - ey / 2, 0, kN), y1 = std::clamp(cy - ey / 2 + ey, 0, kN);
    const int z0 = std::clamp(cz - ez / 2, 0, kN), z1 = std::clamp(cz - ez / 2 + ez, 0, kN);
    for (int z = z0; z < z1; ++z)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) g.cells[static_cast<size_t>((z * kN + y) * kN + x)] = 1;
}

void fill_cylinder(BinaryGrid& g, int axis, int c0, int c1, int c2, int radius, int length) {
    // (c0,c1,c2) is the center; axis selects which coordinate runs the length
    const int r2 = radius * radius;
    for (int t = -length / 2; t < length - length / 2; ++t)
        for (int a = -radius; a <= radius; ++a)
            for (int b = -radius; b <= radius; ++b) {
                if (a * a + b * b > r2) continue;
                int x, y, z;
                if (axis == 0) {
                    x = c0 + t;
                    y = c1 + a;
                    z = c2 + b;
                } else if (axis == 1) {
                    x = c0 + a;
                    y = c1 + t;
                    z = c2 + b;
                } else {
                    x = c0 + a;
                    y = c1 + b;
                    z = c2 + t;
                }
                if (x < 0 || x >= kN || y < 0 || y >= kN || z < 0 || z >= kN) continue;
                g.cells[static_cast<size_t>((z * kN + y) * kN + x)] = 1;
            }
}

std::array<int, 3> random_occupied_cell(const BinaryGrid& g, Rng& rng) {
    std::vector<int64_t> occ;
    for (int64_t i = 0; i < g.size(); ++i)
        if (g.cells[static_cast<size_t>(i)]) occ.push_back(i);
    const int64_t pick = occ[static_cast<size_t>(rng.uniform_u64(occ.size()))];
    return {static_cast<int>(pick % kN), static_cast<int>((pick / kN) % kN),
            static_cast<int>(pick / (kN * kN))};
}

bool is_connected(const BinaryGrid& g) {
    int64_t start = -1;
    for (int64_t i = 0; i < g.size() && start < 0; ++i)
        if (g.cells[static_cast<size_t>(i)]) start = i;
    if (start < 0) return false;
    std::vector<uint8_t> seen(g.cells.size(), 0);
    std::vector<int64_t> stack{start};
    seen[static_cast<size_t>(start)] = 1;
    int64_t reached = 0;
    while (!stack.empty()) {
        const int64_t cur = stack.back();
        stack.pop_back();
        ++reached;
        const int x = static_cast<int>(cur % kN), y = static_cast<int>((cur / kN) % kN),
                  z = static_cast<int>(cur / (kN * kN));
        const int dx[6] = {1, -1, 0, 0, 0, 0}, dy[6] = {0, 0, 1, -1, 0, 0}, dz[6] = {0, 0, 0, 0, 1, -1};
        for (int k = 0; k < 6; ++k) {
            const int nx = x + dx[k], ny = y + dy[k], nz = z + dz[k];
            if (nx < 0 || nx >= kN || ny < 0 || ny >= kN || nz < 0 || nz >= kN) continue;
            const int64_t ni = (static_cast<int64_t>(nz) * kN + ny) * kN + nx;
            if (g.cells[static_cast<size_t>(ni)] && !seen[static_cast<size_t>(ni)]) {
                seen[static_cast<size_t>(ni)] = 1;
                stack.push_back(ni);
            }
        }
    }
    return reached == g.count_occupied();
}

void add_primitive(BinaryGrid& g, Rng& rng, bool first) {
    // anchor subsequent primitives on an occupied cell so the union stays
    // connected by construction
    int cx, cy, cz;
    if (first) {
        cx = rng.uniform_int(10, 21);
        cy = rng.uniform_int(10, 21);
        cz = rng.uniform_int(10, 21);
    } else {
        const auto cell = random_occupied_cell(g, rng);
        cx = cell[0];
        cy = cell[1];
        cz = cell[2];
    }
    switch (rng.uniform_int(0, 2)) {
        case 0:
            fill_box(g, cx, cy, cz, rng.uniform_int(4, 14), rng.uniform_int(4, 14), rng.uniform_int(4, 14));
            break;
        case 1:
            fill_cylinder(g, rng.uniform_int(0, 2), cx, cy, cz, rng.uniform_int(2, 5), rng.uniform_int(6, 18));
            break;
        default: { // L-bracket: two boxes joined at a shared corner
            const int ex = rng.uniform_int(4, 12), ey = rng.uniform_int(4, 12), ez = rng.uniform_int(3, 6);
            fill_box(g, cx, cy, cz, ex, 4, ez);
            fill_box(g, cx + ex / 2 - 2, cy + ey / 2 - 2, cz, 4, ey, ez);
            break;
        }
    }
}

} // namespace

BinaryGrid generate_object_grid(Rng& rng) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        BinaryGrid g;
        g.d = g.h = g.w = kN;
        g.cells.assign(static_cast<size_t>(g.size()), 0);
        const int prims = rng.uniform_int(2, 5);
        for (int p = 0; p < prims; ++p) add_primitive(g, rng, p == 0);
        if (g.count_occupied() >= 32 && is_connected(g)) return g;
    }
    // bounded retries exhausted: fall back to a box, always valid
    BinaryGrid g;
    g.d = g.h = g.w = kN;
    g.cells.assign(static_cast<size_t>(g.size()), 0);
    fill_box(g, 16, 16, 16, 8, 8, 8);
    return g;
}

Tensor render_view(const BinaryGrid& grid, double azimuth, double elevation, int image_size) {
    if (grid.d != kN || grid.h != kN || grid.w != kN) throw contract_error("render_view: grid must be 32^3");
    if (image_size < 8 || image_size % 4 != 0)
        throw contract_error("render_view: image size must be >= 8 and divisible by 4");

    const Vec3 fwd = {-std::cos(elevation) * std::cos(azimuth), -std::cos(elevation) * std::sin(azimuth),
                      -std::sin(elevation)};
    const Vec3 right = normalize(cross(fwd, Vec3{0.0, 0.0, 1.0}));
    const Vec3 up = cross(right, fwd);
    const Vec3 center = {kN / 2.0, kN / 2.0, kN / 2.0};
    const Vec3 cam = {center.x - fwd.x * kCamDistance, center.y - fwd.y * kCamDistance,
                      center.z - fwd.z * kCamDistance};

    std::vector<double> out(static_cast<size_t>(3) * image_size * image_size, 0.0);
    const int64_t plane = static_cast<int64_t>(image_size) * image_size;

    for (int py = 0; py < image_size; ++py) {
        for (int px = 0; px < image_size; ++px) {
            const double u = (px + 0.5 - image_size / 2.0) * kImageSpan / image_size;
            const double v = (py + 0.5 - image_size / 2.0) * kImageSpan / image_size;
            const Vec3 origin = {cam.x + right.x * u + up.x * v, cam.y + right.y * u + up.y * v,
                                 cam.z + right.z * u + up.z * v};

            // slab clip against [0, 32]^3
            double t0 = 0.0, t1 = 2.0 * kCamDistance;
            bool miss = false;
            const double o[3] = {origin.x, origin.y, origin.z};
            const double dir[3] = {fwd.x, fwd.y, fwd.z};
            for (int a = 0; a < 3 && !miss; ++a) {
                if (std::fabs(dir[a]) < 1e-12) {
                    if (o[a] < 0.0 || o[a] >= kN) miss = true;
                    continue;
                }
                double ta = (0.0 - o[a]) / dir[a];
                double tb = (static_cast<double>(kN) - o[a]) / dir[a];
                if (ta > tb) std::swap(ta, tb);
                t0 = std::max(t0, ta);
                t1 = std::min(t1, tb);
            }
            if (miss || t0 >= t1) continue;

            // Amanatides-Woo traversal
            const double eps = 1e-9;
            double t = t0 + eps;
            int ix = std::clamp(static_cast<int>(std::floor(o[0] + dir[0] * t)), 0, kN - 1);
            int iy = std::clamp(static_cast<int>(std::floor(o[1] + dir[1] * t)), 0, kN - 1);
            int iz = std::clamp(static_cast<int>(std::floor(o[2] + dir[2] * t)), 0, kN - 1);
            int idx[3] = {ix, iy, iz};
            double t_max[3], t_delta[3];
            int step[3];
            for (int a = 0; a < 3; ++a) {
                if (std::fabs(dir[a]) < 1e-12) {
                    step[a] = 0;
                    t_max[a] = t1 + 1.0;
                    t_delta[a] = t1 + 1.0;
                } else if (dir[a] > 0) {
                    step[a] = 1;
                    t_max[a] = ((idx[a] + 1) - o[a]) / dir[a];
                    t_delta[a] = 1.0 / dir[a];
                } else {
                    step[a] = -1;
                    t_max[a] = (idx[a] - o[a]) / dir[a];
                    t_delta[a] = -1.0 / dir[a];
                }
            }

            bool hit = false;
            double t_hit = 0.0, inside = 0.0, t_cur = t0;
            while (t_cur < t1) {
                const double t_next = std::min(std::min(t_max[0], std::min(t_max[1], t_max[2])), t1);
                const bool occ = grid.at(idx[2], idx[1], idx[0]);
                if (occ) {
                    if (!hit) {
                        hit = true;
                        t_hit = t_cur;
                    }
                    inside += t_next - t_cur;
                }
                t_cur = t_next;
                if (t_cur >= t1) break;
                int a = 0;
                if (t_max[1] < t_max[0]) a = 1;
                if (t_max[2] < t_max[a]) a = 2;
                idx[a] += step[a];
                if (idx[a] < 0 || idx[a] >= kN) break;
                t_max[a] += t_delta[a];
            }

            if (hit) {
                const int64_t pi = static_cast<int64_t>(py) * image_size + px;
                out[static_cast<size_t>(pi)] = 1.0;
                out[static_cast<size_t>(plane + pi)] = 1.0 - t_hit / (2.0 * kCamDistance);
                out[static_cast<size_t>(2 * plane + pi)] = std::min(1.0, inside / kN);
            }
        }
    }
    return Tensor::from_data({3, image_size, image_size}, std::move(out));
}

std::vector<std::pair<Tensor, ViewMeta>> render_views(const BinaryGrid& grid, int n, Rng& rng,
                                                      int image_size) {
    if (n < 1) throw contract_error("render_views: n must be >= 1");
    std::vector<std::pair<Tensor, ViewMeta>> views;
    views.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        ViewMeta meta;
        meta.azimuth = rng.uniform_real(0.0, 2.0 * M_PI);
        meta.elevation = rng.uniform_real(-1.2, 1.2);
        views.emplace_back(render_view(grid, meta.azimuth, meta.elevation, image_size), meta);
    }
    return views;
}

// ---- file formats ----------------------------------------------------------

namespace {

constexpr char kVoxMagic[5] = {'G', 'V', 'O', 'X', '1'};
constexpr char kImgMagic[5] = {'G', 'I', 'M', 'G', '1'};

void put_u16(std::ofstream& out, uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); }

uint16_t get_u16(std::ifstream& in, const std::string& path, const char* what) {
    uint16_t v = 0;
    const auto off = static_cast<long long>(in.tellg());
    in.read(reinterpret_cast<char*>(&v), 2);
    if (!in)
        throw format_error(std::string("truncated ") + what + " at byte offset " + std::to_string(off) +
                           " in " + path);
    return v;
}

} // namespace

void write_voxel(const std::string& path, const BinaryGrid& grid) {
    if (grid.size() <= 0) throw contract_error("write_voxel: empty grid");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out.write(kVoxMagic, 5);
    put_u16(out, static_cast<uint16_t>(grid.d));
    put_u16(out, static_cast<uint16_t>(grid.h));
    put_u16(out, static_cast<uint16_t>(grid.w));
    const int64_t bits = grid.size();
    std::vector<uint8_t> packed(static_cast<size_t>((bits + 7) / 8), 0);
    for (int64_t i = 0; i < bits; ++i)
        if (grid.cells[static_cast<size_t>(i)])
            packed[static_cast<size_t>(i / 8)] |= static_cast<uint8_t>(1u << (i % 8));
    out.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
    if (!out) throw io_error("write failed: " + path);
}

BinaryGrid read_voxel(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open for reading: " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kVoxMagic, 5) != 0)
        throw format_error("bad voxel magic at byte offset 0 in " + path);
    BinaryGrid g;
    g.d = get_u16(in, path, "extent");
    g.h = get_u16(in, path, "extent");
    g.w = get_u16(in, path, "extent");
    if (g.size() <= 0) throw format_error("zero extent at byte offset 5 in " + path);
    const int64_t bits = g.size();
    std::vector<uint8_t> packed(static_cast<size_t>((bits + 7) / 8));
    in.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
    if (!in) throw format_error("truncated payload at byte offset 11 in " + path);
    g.cells.resize(static_cast<size_t>(bits));
    for (int64_t i = 0; i < bits; ++i)
        g.cells[static_cast<size_t>(i)] = (packed[static_cast<size_t>(i / 8)] >> (i % 8)) & 1u;
    return g;
}

void write_view_image(const std::string& path, const Tensor& image) {
    if (image.shape().size() != 3) throw contract_error("write_view_image: (C,H,W) tensor required");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out.write(kImgMagic, 5);
    for (int e : image.shape()) put_u16(out, static_cast<uint16_t>(e));
    std::vector<float> payload(image.data().begin(), image.data().end());
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw io_error("write failed: " + path);
}

Tensor read_view_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open for reading: " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kImgMagic, 5) != 0)
        throw format_error("bad image magic at byte offset 0 in " + path);
    const int c = get_u16(in, path, "extent"), h = get_u16(in, path, "extent"), w = get_u16(in, path, "extent");
    std::vector<float> payload(static_cast<size_t>(c) * h * w);
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!in) throw format_error("truncated payload at byte offset 11 in " + path);
    return Tensor::from_data({c, h, w}, std::vector<double>(payload.begin(), payload.end()));
}

// ---- manifest and dataset ---------------------------------------------------

void Manifest::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    for (const ManifestRecord& r : records)
        out << r.id << '\t' << r.gt_path << '\t' << r.view_dir << '\t' << r.split << '\n';
    if (!out) throw io_error("write failed: " + path);
}

Manifest Manifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open for reading: " + path);
    Manifest m;
    m.base_dir = fs::path(path).parent_path().string();
    if (m.base_dir.empty()) m.base_dir = ".";
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestRecord r;
        if (!std::getline(ss, r.id, '\t') || !std::getline(ss, r.gt_path, '\t') ||
            !std::getline(ss, r.view_dir, '\t') || !std::getline(ss, r.split))
            throw format_error("malformed manifest line " + std::to_string(line_no) + " in " + path);
        if (r.split != "train" && r.split != "test")
            throw format_error("unknown split tag '" + r.split + "' on line " + std::to_string(line_no));
        m.records.push_back(std::move(r));
    }
    return m;
}

std::vector<ManifestRecord> Manifest::with_split(const std::string& split) const {
    std::vector<ManifestRecord> out;
    for (const ManifestRecord& r : records)
        if (r.split == split) out.push_back(r);
    return out;
}

Manifest build_dataset(int count, int views_per_object, uint64_t seed, const std::string& out_dir,
                       int image_size) {
    if (count < 2) throw contract_error("build_dataset: count must be >= 2");
    if (views_per_object < 1) throw contract_error("build_dataset: views_per_object must be >= 1");
    fs::create_directories(fs::path(out_dir) / "objects");

    Manifest manifest;
    manifest.base_dir = out_dir;
    Rng base(seed);
    for (int i = 0; i < count; ++i) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "obj_%04d", i);
        const std::string id = idbuf;
        const fs::path obj_dir = fs::path(out_dir) / "objects" / id;
        const fs::path view_dir = obj_dir / "views";
        fs::create_directories(view_dir);

        Rng rng = base.stream(static_cast<uint64_t>(i));
        const BinaryGrid gt = generate_object_grid(rng);
        write_voxel((obj_dir / "gt.gvox").string(), gt);

        auto views = render_views(gt, views_per_object, rng, image_size);
        std::ofstream meta((view_dir / "meta.txt").string(), std::ios::trunc);
        if (!meta) throw io_error("cannot open for writing: " + (view_dir / "meta.txt").string());
        for (size_t v = 0; v < views.size(); ++v) {
            char name[32];
            std::snprintf(name, sizeof(name), "view_%03zu.gimg", v);
            write_view_image((view_dir / name).string(), views[v].first);
            char meta_line[64];
            std::snprintf(meta_line, sizeof(meta_line), "%.17g %.17g\n", views[v].second.azimuth,
                          views[v].second.elevation);
            meta << meta_line;
        }

        ManifestRecord rec;
        rec.id = id;
        rec.gt_path = (fs::path("objects") / id / "gt.gvox").string();
        rec.view_dir = (fs::path("objects") / id / "views").string();
        rec.split = "train";
        manifest.records.push_back(std::move(rec));
    }
    manifest.save((fs::path(out_dir) / "manifest.tsv").string());
    return manifest;
}

Manifest split_dataset(const Manifest& manifest, double test_fraction, uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction <= 1.0))
        throw contract_error("split_dataset: test_fraction must lie in [0,1]");
    Manifest out = manifest;
    std::vector<size_t> order(out.records.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = Rng(seed).stream("split");
    rng.shuffle(order);
    const auto n_test = static_cast<size_t>(
        std::llround(test_fraction * static_cast<double>(out.records.size())));
    for (size_t i = 0; i < order.size(); ++i) out.records[order[i]].split = i < n_test ? "test" : "train";
    return out;
}

LoadedObject load_object(const Manifest& manifest, const ManifestRecord& rec) {
    LoadedObject obj;
    obj.id = rec.id;
    obj.gt = read_voxel((fs::path(manifest.base_dir) / rec.gt_path).string());
    const fs::path dir = fs::path(manifest.base_dir) / rec.view_dir;
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".gimg") files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw io_error("no views found under " + dir.string());
    for (const std::string& f : files) obj.views.push_back(read_view_image(f));
    return obj;
}

std::vector<ViewMeta> load_view_meta(const Manifest& manifest, const ManifestRecord& rec) {
    const fs::path path = fs::path(manifest.base_dir) / rec.view_dir / "meta.txt";
    std::ifstream in(path);
    if (!in) throw io_error("cannot open for reading: " + path.string());
    std::vector<ViewMeta> metas;
    ViewMeta m;
    while (in >> m.azimuth >> m.elevation) metas.push_back(m);
    return metas;
}

} // namespace garnet
