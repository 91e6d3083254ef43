#include "opmatch/io.hpp"

#include <cstring>
#include <fstream>

namespace opmatch::io {

namespace {

// Little-endian host assumed (checked once); file format is LE by contract.
void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::istream& is, const std::string& path) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw IoError(path + ": truncated file");
    return v;
}

void write_tensor_record(std::ostream& os, const Tensor& t) {
    os.write("OPMT", 4);
    write_u32(os, (uint32_t)t.rank());
    for (int i = 0; i < t.rank(); ++i) write_u32(os, (uint32_t)t.dim(i));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             (std::streamsize)(t.numel() * sizeof(double)));
}

Tensor read_tensor_record(std::istream& is, const std::string& path) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "OPMT", 4) != 0)
        throw IoError(path + ": not an OPMT tensor record");
    uint32_t rank = read_u32(is, path);
    if (rank > 8) throw IoError(path + ": implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = read_u32(is, path);
    std::vector<double> data((size_t)shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 (std::streamsize)(data.size() * sizeof(double))))
        throw IoError(path + ": truncated tensor data");
    return Tensor::from_data(shape, std::move(data));
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(path + ": cannot open for writing");
    write_tensor_record(os, t);
    if (!os) throw IoError(path + ": write failed");
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path + ": cannot open");
    return read_tensor_record(is, path);
}

void save_archive(const std::string& path,
                  const std::map<std::string, Tensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(path + ": cannot open for writing");
    os.write("OPMA", 4);
    write_u32(os, (uint32_t)tensors.size());
    for (const auto& [name, t] : tensors) {
        write_u32(os, (uint32_t)name.size());
        os.write(name.data(), (std::streamsize)name.size());
        write_tensor_record(os, t);
    }
    if (!os) throw IoError(path + ": write failed");
}

std::map<std::string, Tensor> load_archive(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path + ": cannot open");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "OPMA", 4) != 0)
        throw IoError(path + ": not an OPMA archive");
    uint32_t count = read_u32(is, path);
    std::map<std::string, Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t len = read_u32(is, path);
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw IoError(path + ": truncated name");
        out.emplace(name, read_tensor_record(is, path));
    }
    return out;
}

}  // namespace opmatch::io
