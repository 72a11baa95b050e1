#include "kbc/media.hpp"

#include <cstring>
#include <memory>
#include <vector>

#include <openssl/evp.h>
#include <openssl/sha.h>
#include <png.h>

#include "kbc/error.hpp"

namespace kbc {

std::string_view image_format_name(ImageFormat f) noexcept { return f == ImageFormat::Png ? "png" : "jpeg"; }

ImageFormat parse_image_format(std::string_view name) {
    if (name == "png") return ImageFormat::Png;
    if (name == "jpeg" || name == "jpg") return ImageFormat::Jpeg;
    throw Error(Errc::ParseError, "unknown image format '" + std::string(name) + "'");
}

std::string_view mime_type(ImageFormat f) noexcept { return f == ImageFormat::Png ? "image/png" : "image/jpeg"; }

std::optional<ImageFormat> sniff_image_format(std::string_view bytes) noexcept {
    static constexpr unsigned char kPng[] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() >= sizeof kPng && std::memcmp(bytes.data(), kPng, sizeof kPng) == 0) return ImageFormat::Png;
    if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xff &&
        static_cast<unsigned char>(bytes[1]) == 0xd8 && static_cast<unsigned char>(bytes[2]) == 0xff)
        return ImageFormat::Jpeg;
    return std::nullopt;
}

std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(bytes.data()),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::string base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) throw Error(Errc::ParseError, "base64 length is not a multiple of 4");
    std::string out(3 * text.size() / 4, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) throw Error(Errc::ParseError, "malformed base64");
    // EVP_DecodeBlock keeps the bytes produced by '=' padding.
    std::size_t pad = 0;
    if (!text.empty() && text.back() == '=') ++pad;
    if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

namespace {

std::array<unsigned char, SHA256_DIGEST_LENGTH> sha256(std::string_view bytes) {
    std::array<unsigned char, SHA256_DIGEST_LENGTH> digest{};
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);
    return digest;
}

struct PngBuffer {
    std::string_view data;
    std::size_t pos = 0;
};

void png_read_from_buffer(png_structp png, png_bytep out, png_size_t len) {
    auto* buf = static_cast<PngBuffer*>(png_get_io_ptr(png));
    if (buf->pos + len > buf->data.size()) png_error(png, "truncated");
    std::memcpy(out, buf->data.data() + buf->pos, len);
    buf->pos += len;
}

void png_write_to_string(png_structp png, png_bytep data, png_size_t len) {
    static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<const char*>(data), len);
}

void png_flush_noop(png_structp) {}

void png_silent_warning(png_structp, png_const_charp) {}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (unsigned char c : sha256(bytes)) {
        out.push_back(kHex[c >> 4]);
        out.push_back(kHex[c & 0xf]);
    }
    return out;
}

std::uint64_t sha256_u64(std::string_view bytes) {
    const auto d = sha256(bytes);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | d[static_cast<std::size_t>(i)];
    return v;
}

std::string encode_solid_png(int width, int height, Rgb colour, std::string_view caption) {
    if (width <= 0 || height <= 0) throw Error(Errc::Precondition, "image dimensions must be positive");
    std::string out;
    std::string key = "Description";
    std::string text(caption);
    std::vector<png_byte> row(static_cast<std::size_t>(width) * 3);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_silent_warning);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(Errc::IoError, "png encoding failed");
    }
    png_set_write_fn(png, &out, png_write_to_string, png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_text chunk{};
    if (!caption.empty()) {
        chunk.compression = PNG_TEXT_COMPRESSION_NONE;
        chunk.key = key.data();
        chunk.text = text.data();
        chunk.text_length = text.size();
        png_set_text(png, info, &chunk, 1);
    }
    png_write_info(png, info);
    for (int x = 0; x < width; ++x) {
        row[3 * x] = colour.r;
        row[3 * x + 1] = colour.g;
        row[3 * x + 2] = colour.b;
    }
    for (int y = 0; y < height; ++y) png_write_row(png, row.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

std::optional<PngInfo> decode_png(std::string_view bytes) {
    if (sniff_image_format(bytes) != ImageFormat::Png) return std::nullopt;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_silent_warning);
    png_infop info = png_create_info_struct(png);
    png_infop end_info = png_create_info_struct(png);
    PngBuffer buf{bytes, 0};
    std::vector<png_byte> row;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, &end_info);
        return std::nullopt;
    }
    png_set_read_fn(png, &buf, png_read_from_buffer);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_interlace_handling(png);
    png_read_update_info(png, info);
    PngInfo out;
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    row.resize(png_get_rowbytes(png, info));
    for (int y = 0; y < out.height; ++y) png_read_row(png, row.data(), nullptr);
    png_read_end(png, end_info);
    for (png_infop i : {info, end_info}) {
        png_textp text = nullptr;
        int count = 0;
        png_get_text(png, i, &text, &count);
        for (int k = 0; k < count && !out.caption; ++k) {
            if (std::strcmp(text[k].key, "Description") == 0)
                out.caption = std::string(text[k].text, text[k].text_length);
        }
    }
    png_destroy_read_struct(&png, &info, &end_info);
    return out;
}

bool image_decodable(std::string_view bytes) {
    switch (sniff_image_format(bytes).value_or(ImageFormat::Png)) {
    case ImageFormat::Png:
        return decode_png(bytes).has_value();
    case ImageFormat::Jpeg:
        // SOI ... EOI; full JPEG decoding is left to the consumers.
        return bytes.size() > 4 && static_cast<unsigned char>(bytes[bytes.size() - 2]) == 0xff &&
               static_cast<unsigned char>(bytes[bytes.size() - 1]) == 0xd9;
    }
    return false;
}

}  // namespace kbc

namespace kbc {

std::string_view modality_name(Modality m) noexcept { return m == Modality::Image ? "image" : "text"; }

Modality parse_modality(std::string_view name) {
    if (name == "image") return Modality::Image;
    if (name == "text") return Modality::Text;
    throw Error(Errc::ParseError, "unknown modality '" + std::string(name) + "'");
}

}  // namespace kbc
