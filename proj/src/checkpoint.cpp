#include "garnet/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace garnet {

namespace {

constexpr char kMagic[5] = {'G', 'A', 'R', 'W', '1'};

void require_little_endian() {
    if constexpr (std::endian::native != std::endian::little)
        throw io_error("checkpoint format requires a little-endian host");
}

void put_u32(std::ofstream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t get_u32(std::ifstream& in, const char* what) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in)
        throw format_error(std::string("checkpoint truncated reading ") + what + " at byte offset " +
                           std::to_string(static_cast<long long>(in.gcount())));
    return v;
}

} // namespace

void save_named_tensors(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& items) {
    require_little_endian();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    for (const auto& [name, t] : items) {
        put_u32(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(out, static_cast<uint32_t>(t.shape().size()));
        for (int e : t.shape()) put_u32(out, static_cast<uint32_t>(e));
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    }
    if (!out) throw io_error("write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::string& path) {
    require_little_endian();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open for reading: " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kMagic, 5) != 0)
        throw format_error("bad checkpoint magic at byte offset 0 in " + path);

    std::vector<std::pair<std::string, Tensor>> items;
    while (true) {
        in.peek();
        if (in.eof()) break;
        const auto offset = static_cast<long long>(in.tellg());
        uint32_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), 4);
        if (in.eof() && in.gcount() == 0) break;
        if (!in || in.gcount() != 4)
            throw format_error("checkpoint truncated at byte offset " + std::to_string(offset));
        if (name_len == 0 || name_len > 4096)
            throw format_error("implausible name length at byte offset " + std::to_string(offset));
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw format_error("checkpoint truncated in name at byte offset " + std::to_string(offset));
        const uint32_t rank = get_u32(in, "rank");
        if (rank > 8) throw format_error("implausible rank at byte offset " + std::to_string(offset));
        Shape shape(rank);
        int64_t count = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<int>(get_u32(in, "extent"));
            count *= shape[d];
        }
        std::vector<double> data(static_cast<size_t>(count));
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(double)));
        if (!in)
            throw format_error("checkpoint truncated in payload of " + name + " at byte offset " +
                               std::to_string(offset));
        items.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data)));
    }
    return items;
}

} // namespace garnet
