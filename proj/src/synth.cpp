#include "bikefed/synth.hpp"

#include <cmath>
#include <sstream>

namespace bikefed {

namespace {

struct StationProfile {
    StationId id;
    int client = 0;
    double scale = 1.0;
    double business = 0.5;  // share of morning arrivals vs. morning departures
};

double bump(double h, double center, double width) {
    double d = std::abs(h - center);
    d = std::min(d, 24.0 - d);
    return std::exp(-d * d / (2.0 * width * width));
}

// Hourly (arrivals, departures) rates.
std::pair<double, double> rates(const StationProfile& s, int hour, int dow) {
    const double h = hour;
    const double night = 0.15;
    const double am = bump(h, 8.0, 1.3);
    const double pm = bump(h, 17.5, 1.6);
    const double midday = bump(h, 13.0, 3.0);
    double arr, dep;
    if (dow < 5) {
        arr = night + 2.0 * (s.business * am + (1.0 - s.business) * pm) + 0.6 * midday;
        dep = night + 2.0 * ((1.0 - s.business) * am + s.business * pm) + 0.6 * midday;
    } else {
        arr = night + 1.4 * midday;
        dep = night + 1.4 * bump(h, 12.0, 3.0);
    }
    const double weekly = dow == 4 ? 1.1 : 1.0;
    return {s.scale * weekly * arr, s.scale * weekly * dep};
}

std::vector<StationProfile> profiles(const SynthSpec& spec) {
    Rng rng(mix_seed(spec.seed, 1));
    std::vector<StationProfile> out;
    for (int c = 0; c < spec.n_clients; ++c) {
        const double client_scale = 0.6 + 0.8 * rng.uniform();
        for (int k = 0; k < spec.stations_per_client; ++k) {
            StationProfile p;
            char buf[32];
            std::snprintf(buf, sizeof buf, "S%02d_%03d", c, k);
            p.id = buf;
            p.client = c;
            p.scale = client_scale * (1.0 + 3.0 * rng.uniform());
            p.business = rng.uniform();
            out.push_back(p);
        }
    }
    return out;
}

Timestamp start_time(const SynthSpec& spec) {
    Timestamp t0;
    if (!parse_timestamp(spec.start, t0)) throw ConfigError("synth: bad start timestamp '" + spec.start + "'");
    return floor_to_hour(t0);
}

}  // namespace

SynthDataset synthetic_demand(const SynthSpec& spec) {
    if (spec.n_clients < 1 || spec.stations_per_client < 1 || spec.days < 1) throw ConfigError("synth: bad sizes");
    const Timestamp t0 = start_time(spec);
    const Eigen::Index L = static_cast<Eigen::Index>(spec.days) * 24;
    SynthDataset out;
    out.partition.n_clients = spec.n_clients;
    Rng noise(mix_seed(spec.seed, 2));
    for (const auto& s : profiles(spec)) {
        DemandSeries ds;
        ds.station = s.id;
        ds.t0 = t0;
        ds.arrivals.resize(L);
        ds.departures.resize(L);
        for (Eigen::Index i = 0; i < L; ++i) {
            const Timestamp t = t0 + Hours{i};
            const auto [a, d] = rates(s, hour_of_day(t), day_of_week(t));
            ds.arrivals[i] = noise.poisson(a);
            ds.departures[i] = noise.poisson(d);
        }
        out.partition.assignment[s.id] = s.client;
        out.demand.emplace(s.id, std::move(ds));
    }
    return out;
}

std::string synthetic_trip_csv(const SynthSpec& spec) {
    const Timestamp t0 = start_time(spec);
    const auto stations = profiles(spec);
    Rng rng(mix_seed(spec.seed, 3));
    std::ostringstream out;
    out << "ride_id,start_station_id,end_station_id,started_at,ended_at\n";
    std::size_t ride = 0;
    const Eigen::Index L = static_cast<Eigen::Index>(spec.days) * 24;
    for (Eigen::Index i = 0; i < L; ++i) {
        const Timestamp hour = t0 + Hours{i};
        for (const auto& s : stations) {
            const auto n = rng.poisson(rates(s, hour_of_day(hour), day_of_week(hour)).second);
            for (std::int64_t k = 0; k < n; ++k) {
                const auto& dest = stations[static_cast<std::size_t>(rng.below(stations.size()))];
                const Timestamp start = hour + std::chrono::seconds{static_cast<std::int64_t>(rng.below(3600))};
                const Timestamp end = start + std::chrono::seconds{180 + static_cast<std::int64_t>(rng.below(2400))};
                out << "r" << ride++ << ',' << s.id << ',' << dest.id << ',' << format_timestamp(start) << ','
                    << format_timestamp(end) << '\n';
            }
        }
        // Rows the cleaner must reject.
        if (i % 97 == 0) {
            const auto& s = stations[static_cast<std::size_t>(rng.below(stations.size()))];
            out << "r" << ride++ << ',' << s.id << ',' << s.id << ',' << format_timestamp(hour) << ','
                << format_timestamp(hour + std::chrono::seconds{30}) << '\n';
            out << "r" << ride++ << ',' << s.id << ",," << format_timestamp(hour) << ','
                << format_timestamp(hour + std::chrono::seconds{600}) << '\n';
        }
    }
    return out.str();
}

}  // namespace bikefed
