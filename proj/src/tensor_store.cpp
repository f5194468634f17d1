#include "ferrosnn/tensor_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace ferrosnn {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "tensor container is little-endian on disk and in memory");

void TensorStore::put(Tensor t) {
    for (auto& existing : tensors_) {
        if (existing.name == t.name) {
            existing = std::move(t);
            return;
        }
    }
    tensors_.push_back(std::move(t));
}

bool TensorStore::contains(const std::string& name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return true;
    return false;
}

const Tensor& TensorStore::get(const std::string& name) const {
    for (const auto& t : tensors_)
        if (t.name == name) return t;
    throw std::out_of_range("tensor store has no tensor named '" + name + "'");
}

Tensor& TensorStore::get(const std::string& name) {
    for (auto& t : tensors_)
        if (t.name == name) return t;
    throw std::out_of_range("tensor store has no tensor named '" + name + "'");
}

std::vector<std::string> TensorStore::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& t : tensors_) out.push_back(t.name);
    return out;
}

void TensorStore::save(const std::filesystem::path& base) const {
    const auto bin_path = std::filesystem::path(base).replace_extension(".bin");
    const auto man_path = std::filesystem::path(base).replace_extension(".json");

    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot open " + bin_path.string() + " for writing");

    json manifest;
    manifest["format"] = "ferrosnn-tensors-v1";
    manifest["byte_order"] = "little";
    json entries = json::array();
    std::size_t offset = 0;
    for (const auto& t : tensors_) {
        if (t.data.size() != t.size())
            throw std::runtime_error("tensor '" + t.name + "' data does not match its shape");
        json e;
        e["name"] = t.name;
        e["shape"] = t.shape;
        e["dtype"] = "f64";
        e["dtype_bytes"] = 8;
        e["offset"] = offset;
        e["bound"] = t.bound;
        entries.push_back(e);
        bin.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        offset += t.data.size() * sizeof(double);
    }
    manifest["tensors"] = entries;
    manifest["meta"] = meta;
    if (!bin) throw std::runtime_error("write failed on " + bin_path.string());
    bin.close();

    std::ofstream man(man_path, std::ios::trunc);
    if (!man) throw std::runtime_error("cannot open " + man_path.string() + " for writing");
    man << manifest.dump(2) << "\n";
}

TensorStore TensorStore::load(const std::filesystem::path& base) {
    const auto bin_path = std::filesystem::path(base).replace_extension(".bin");
    const auto man_path = std::filesystem::path(base).replace_extension(".json");

    std::ifstream man(man_path);
    if (!man) throw std::runtime_error("cannot open " + man_path.string());
    json manifest = json::parse(man);
    if (manifest.value("byte_order", "") != "little")
        throw std::runtime_error("unsupported byte order in " + man_path.string());

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + bin_path.string());

    TensorStore store;
    if (manifest.contains("meta"))
        store.meta = manifest["meta"].get<std::map<std::string, std::string>>();
    for (const auto& e : manifest["tensors"]) {
        Tensor t;
        t.name = e["name"].get<std::string>();
        t.shape = e["shape"].get<std::vector<std::size_t>>();
        t.bound = e.value("bound", 0.0);
        if (e.value("dtype", "") != "f64")
            throw std::runtime_error("unsupported dtype for tensor '" + t.name + "'");
        t.data.resize(t.size());
        bin.seekg(static_cast<std::streamoff>(e["offset"].get<std::size_t>()));
        bin.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!bin)
            throw std::runtime_error("container " + bin_path.string() + " truncated at tensor '" +
                                     t.name + "'");
        store.put(std::move(t));
    }
    return store;
}

}  // namespace ferrosnn
