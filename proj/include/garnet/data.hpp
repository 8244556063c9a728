#pragma once

#include <string>
#include <vector>

#include "garnet/losses.hpp"
#include "garnet/rng.hpp"
#include "garnet/tensor.hpp"

namespace garnet {

// Viewpoint record kept for test oracles only; it never reaches the model.
struct ViewMeta {
    double azimuth = 0.0;   // radians, about the +z axis
    double elevation = 0.0; // radians, limited to [-1.2, 1.2]
};

constexpr int kGridExtent = 32;

// Union of 2-5 axis-aligned boxes, cylinders and L-brackets inside the 32^3
// grid; connected (6-neighbourhood) with at least 32 occupied cells.
BinaryGrid generate_object_grid(Rng& rng);

// Orthographic ray cast through the grid. Camera geometry: forward是
// -(cos el cos az, cos el sin az, sin el); right = normalize(forward x +z);
// up = right x forward; the image spans 50 grid units, rays start 50 units in
// front of the grid center. Channels: silhouette, 1 - t_hit/100, and the
// in-object path length normalized by 32 (clamped to 1).
Tensor render_view(const BinaryGrid& grid, double azimuth, double elevation, int image_size);

std::vector<std::pair<Tensor, ViewMeta>> render_views(const BinaryGrid& grid, int n, Rng& rng,
                                                      int image_size);

// GVOX1 voxel file: 5-byte magic, three u16 little-endian extents, bit-packed
// occupancy (row-major, LSB first). Round-trips bit-exactly.
void write_voxel(const std::string& path, const BinaryGrid& grid);
BinaryGrid read_voxel(const std::string& path);

// GIMG1 view file: 5-byte magic, u16 channels/height/width, f32 LE payload.
void write_view_image(const std::string& path, const Tensor& image);
Tensor read_view_image(const std::string& path);

struct ManifestRecord {
    std::string id;
    std::string gt_path;  // relative to the manifest directory
    std::string view_dir; // relative to the manifest directory
    std::string split;    // "train" or "test"
};

struct Manifest {
    std::string base_dir;
    std::vector<ManifestRecord> records;

    void save(const std::string& path) const; // line format: id\tgt\tviews\tsplit
    static Manifest load(const std::string& path);
    std::vector<ManifestRecord> with_split(const std::string& split) const;
};

// Writes count objects with their rendered views under out_dir and returns
// the manifest (all records tagged "train"; apply split_dataset afterwards).
Manifest build_dataset(int count, int views_per_object, uint64_t seed, const std::string& out_dir,
                       int image_size = 32);

// Deterministic disjoint and exhaustive reassignment of split tags.
Manifest split_dataset(const Manifest& manifest, double test_fraction, uint64_t seed);

// Model-facing loader: pixels and ground truth only, no viewpoint metadata.
struct LoadedObject {
    std::string id;
    BinaryGrid gt;
    std::vector<Tensor> views;
};

LoadedObject load_object(const Manifest& manifest, const ManifestRecord& rec);
// Oracle-side loader for tests; kept separate from the model path.
std::vector<ViewMeta> load_view_meta(const Manifest& manifest, const ManifestRecord& rec);

} // namespace garnet
