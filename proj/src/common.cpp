#include "bikefed/common.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>
#include <vector>

namespace bikefed {

namespace {

bool parse_int(std::string_view text, int& out) {
    if (text.empty()) return false;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, out);
    return ec == std::errc{} && ptr == end;
}

std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

bool parse_date(std::string_view text, std::int64_t& days) {
    if (text.size() != 10 || text[4] != '-' || text[7] != '-') return false;
    int y = 0, m = 0, d = 0;
    if (!parse_int(text.substr(0, 4), y) || !parse_int(text.substr(5, 2), m) ||
        !parse_int(text.substr(8, 2), d))
        return false;
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(m)},
                                          std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) return false;
    days = std::chrono::sys_days{ymd}.time_since_epoch().count();
    return true;
}

bool parse_timestamp(std::string_view text, Timestamp& out) {
    if (text.size() < 19) return false;
    if (text[10] != 'T' && text[10] != ' ') return false;
    if (text[13] != ':' || text[16] != ':') return false;
    std::int64_t days = 0;
    if (!parse_date(text.substr(0, 10), days)) return false;
    int hh = 0, mm = 0, ss = 0;
    if (!parse_int(text.substr(11, 2), hh) || !parse_int(text.substr(14, 2), mm) ||
        !parse_int(text.substr(17, 2), ss))
        return false;
    if (hh > 23 || mm > 59 || ss > 60) return false;
    if (text.size() > 19) {
        if (text[19] != '.') return false;
        for (char c : text.substr(20))
            if (c < '0' || c > '9') return false;
    }
    out = Timestamp{std::chrono::seconds{days * kSecondsPerDay + hh * 3600 + mm * 60 + ss}};
    return true;
}

std::string format_timestamp(Timestamp t) {
    const auto secs = t.time_since_epoch().count();
    const auto days = static_cast<std::int64_t>(std::floor(static_cast<double>(secs) / kSecondsPerDay));
    const auto rem = secs - days * kSecondsPerDay;
    const std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{days}}};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02lld:%02lld:%02lld", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<long long>(rem / 3600), static_cast<long long>((rem / 60) % 60),
                  static_cast<long long>(rem % 60));
    return buf;
}

Timestamp floor_to_hour(Timestamp t) { return std::chrono::floor<Hours>(t); }

std::int64_t days_since_epoch(Timestamp t) { return std::chrono::floor<std::chrono::days>(t).time_since_epoch().count(); }

int day_of_week(Timestamp t) {
    const std::chrono::weekday wd{std::chrono::floor<std::chrono::days>(t)};
    return static_cast<int>(wd.iso_encoding()) - 1;
}

int hour_of_day(Timestamp t) {
    const auto secs = t - std::chrono::floor<std::chrono::days>(t);
    return static_cast<int>(secs.count() / kSecondsPerHour);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = seed;
    std::uint64_t h = splitmix64(x);
    x = h ^ (a * 0xd1b54a32d192ed03ULL);
    h = splitmix64(x);
    x = h ^ (b * 0xabc98388fb8fac03ULL);
    return splitmix64(x);
}

Rng::Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
}

std::uint64_t Rng::next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below(0)");
    // Lemire-style rejection on the low range to stay unbiased.
    const std::uint64_t limit = (~std::uint64_t{0} - n + 1) % n;
    for (;;) {
        const std::uint64_t r = next();
        if (r >= limit) return r % n;
    }
}

bool Rng::bernoulli(double p) { return uniform() < p; }

std::int64_t Rng::poisson(double lambda) {
    if (lambda <= 0.0) return 0;
    if (lambda > 60.0) {
        const double v = std::round(lambda + std::sqrt(lambda) * normal());
        return v < 0.0 ? 0 : static_cast<std::int64_t>(v);
    }
    // Inversion by sequential search.
    const double u = uniform();
    double p = std::exp(-lambda);
    double cdf = p;
    std::int64_t k = 0;
    while (u > cdf && k < 1000) {
        ++k;
        p *= lambda / static_cast<double>(k);
        cdf += p;
    }
    return k;
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

void atomic_write(const std::filesystem::path& path, std::string_view contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void parallel_for(std::size_t n, int n_threads, const std::function<void(std::size_t)>& body) {
    const auto workers = static_cast<std::size_t>(std::max(1, n_threads));
    if (workers == 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < std::min(workers, n); ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) body(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace bikefed
