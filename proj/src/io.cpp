#include "cvseq/io.hpp"

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace cvseq {

void save_tensors(const std::string& path, const ParamList& tensors) {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    int64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        nlohmann::ordered_json entry;
        entry["shape"] = t.shape();
        entry["byte_offset"] = offset;
        header[name] = entry;
        offset += static_cast<int64_t>(t.numel()) * 4;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << header.dump() << "\n";
    for (const auto& [name, t] : tensors) {
        for (double v : t.data()) {
            float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
    }
    if (!out) throw std::runtime_error("write failed for " + path);
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw std::runtime_error("missing header in " + path);
    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed header in " + path + ": " + e.what());
    }
    std::streampos payload_start = in.tellg();
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, entry] : header.items()) {
        Shape shape = entry.at("shape").get<Shape>();
        int64_t byte_offset = entry.at("byte_offset").get<int64_t>();
        int n = shape_numel(shape);
        std::vector<float> buf(static_cast<size_t>(n));
        in.seekg(payload_start + static_cast<std::streamoff>(byte_offset));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n) * 4);
        if (!in)
            throw std::runtime_error("truncated payload for '" + name + "' in " + path);
        std::vector<double> data(buf.begin(), buf.end());
        out.emplace_back(name, Tensor::from_data(shape, std::move(data)));
    }
    return out;
}

void load_checkpoint(const std::string& path, ParamList& params, bool allow_missing) {
    auto stored = load_tensors(path);
    std::map<std::string, Tensor> by_name(stored.begin(), stored.end());
    std::map<std::string, bool> used;
    for (auto& [name, _] : by_name) used[name] = false;
    for (auto& [name, param] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            if (allow_missing) continue;
            throw std::runtime_error("checkpoint " + path + " has no parameter '" + name + "'");
        }
        if (it->second.shape() != param.shape())
            throw std::runtime_error("checkpoint shape mismatch for '" + name + "': file " +
                                     shape_str(it->second.shape()) + ", model " +
                                     shape_str(param.shape()));
        param.data() = it->second.data();
        used[name] = true;
    }
    for (auto& [name, u] : used)
        if (!u)
            throw std::runtime_error("checkpoint entry '" + name +
                                     "' does not match any model parameter");
}

// --- png ----------------------------------------------------------------------

Tensor read_png_rgb(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png decode failed for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    // normalize any 8-bit-compatible layout to RGB8
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    Tensor img = Tensor::zeros({3, static_cast<int>(h), static_cast<int>(w)});
    auto& d = img.data();
    for (png_uint_32 y = 0; y < h; y++) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; x++)
            for (int c = 0; c < 3; c++)
                d[(static_cast<size_t>(c) * h + y) * w + x] = row[x * 3 + c] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

void write_png_rgb(const std::string& path, const Tensor& img) {
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw std::invalid_argument("write_png_rgb: [3,H,W] tensor required, got " +
                                    shape_str(img.shape()));
    int h = img.dim(1), w = img.dim(2);
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("png encode failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const auto& d = img.data();
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; y++) {
        for (int x = 0; x < w; x++)
            for (int c = 0; c < 3; c++) {
                double v = d[(static_cast<size_t>(c) * h + y) * w + x];
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<png_byte>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace cvseq
