#include "bikefed/ingest.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace bikefed {

namespace {

// Splits one delimited line, honoring double quotes ("" escapes a quote).
std::vector<std::string> split_fields(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == delim) {
            out.push_back(std::move(field));
            field.clear();
        } else {
            field.push_back(c);
        }
    }
    out.push_back(std::move(field));
    return out;
}

std::size_t column_index(const std::vector<std::string>& header, const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("column '" + name + "' missing from header");
    return static_cast<std::size_t>(it - header.begin());
}

void strip_cr(std::string& line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

ParseResult parse_trips(std::istream& source, const TripSchema& schema) {
    if (!source) throw IoError("trip source is not readable");
    std::string line;
    if (!std::getline(source, line)) throw SchemaError("trip source has no header row");
    strip_cr(line);
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    const auto header = split_fields(line, schema.delimiter);
    const std::size_t c_start = column_index(header, schema.start_station);
    const std::size_t c_end = column_index(header, schema.end_station);
    const std::size_t c_t0 = column_index(header, schema.started_at);
    const std::size_t c_t1 = column_index(header, schema.ended_at);
    const std::size_t needed = std::max({c_start, c_end, c_t0, c_t1}) + 1;

    ParseResult result;
    std::size_t line_no = 1;
    while (std::getline(source, line)) {
        ++line_no;
        strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split_fields(line, schema.delimiter);
        Trip trip;
        bool ok = fields.size() >= needed;
        if (ok) {
            trip.start_station = fields[c_start];
            trip.end_station = fields[c_end];
            ok = !trip.start_station.empty() && !trip.end_station.empty() &&
                 parse_timestamp(fields[c_t0], trip.t_start) && parse_timestamp(fields[c_t1], trip.t_end);
        }
        if (ok) {
            result.trips.push_back(std::move(trip));
        } else {
            ++result.malformed;
            if (result.malformed_lines.size() < 16) result.malformed_lines.push_back(line_no);
        }
    }
    if (source.bad()) throw IoError("read error in trip source");
    return result;
}

ParseResult parse_trips_file(const std::filesystem::path& path, const TripSchema& schema) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open trip file: " + path.string());
    return parse_trips(in, schema);
}

CleanResult clean_trips(const std::vector<Trip>& trips, const CleanParams& params) {
    CleanResult out;
    out.report.input = trips.size();

    std::vector<const Trip*> kept;
    kept.reserve(trips.size());
    for (const auto& t : trips) {
        const auto duration = t.t_end - t.t_start;
        if (duration.count() < 0) {
            ++out.report.removed_negative;
        } else if (duration > params.max_duration) {
            ++out.report.removed_duration;
        } else if (t.start_station == t.end_station && duration < params.min_roundtrip) {
            ++out.report.removed_short_roundtrip;
        } else {
            kept.push_back(&t);
        }
    }

    struct Activity {
        std::int64_t first_day = std::numeric_limits<std::int64_t>::max();
        std::int64_t last_day = std::numeric_limits<std::int64_t>::min();
        std::size_t departures = 0;
    };
    std::map<StationId, Activity> activity;
    auto touch = [&](const StationId& s, Timestamp t) {
        auto& a = activity[s];
        const auto d = days_since_epoch(t);
        a.first_day = std::min(a.first_day, d);
        a.last_day = std::max(a.last_day, d);
    };
    for (const Trip* t : kept) {
        touch(t->start_station, t->t_start);
        touch(t->end_station, t->t_end);
        ++activity[t->start_station].departures;
    }

    for (const auto& [station, a] : activity) {
        const auto active_days = static_cast<double>(a.last_day - a.first_day + 1);
        if (static_cast<double>(a.departures) / active_days >= params.min_daily_rentals)
            out.stations.insert(station);
        else
            ++out.report.stations_dropped;
    }

    for (const Trip* t : kept) {
        if (out.stations.count(t->start_station) && out.stations.count(t->end_station))
            out.trips.push_back(*t);
        else
            ++out.report.removed_inactive_station;
    }
    out.report.retained = out.trips.size();
    return out;
}

HourGrid grid_span(const std::vector<Trip>& trips) {
    if (trips.empty()) throw DataError("cannot derive an hour grid from zero trips");
    Timestamp lo = Timestamp::max();
    Timestamp hi = Timestamp::min();
    for (const auto& t : trips) {
        lo = std::min({lo, t.t_start, t.t_end});
        hi = std::max({hi, t.t_start, t.t_end});
    }
    HourGrid grid;
    grid.t0 = floor_to_hour(lo);
    grid.length = std::chrono::duration_cast<Hours>(floor_to_hour(hi) - grid.t0).count() + 1;
    return grid;
}

DemandStore aggregate_demand(const std::vector<Trip>& trips, const std::set<StationId>& stations,
                             std::chrono::seconds step) {
    if (step != std::chrono::seconds{kSecondsPerHour})
        throw ConfigError("aggregate_demand supports a one-hour step only");
    return aggregate_demand(trips, stations, grid_span(trips));
}

DemandStore aggregate_demand(const std::vector<Trip>& trips, const std::set<StationId>& stations,
                             const HourGrid& grid) {
    if (stations.empty()) throw DataError("aggregate_demand: no stations requested");
    if (grid.length < 1) throw DataError("aggregate_demand: empty hour grid");
    DemandStore store;
    for (const auto& s : stations) {
        DemandSeries ds;
        ds.station = s;
        ds.t0 = grid.t0;
        ds.arrivals = Counts::Zero(grid.length);
        ds.departures = Counts::Zero(grid.length);
        store.emplace(s, std::move(ds));
    }
    auto slot = [&](Timestamp t) -> Eigen::Index {
        const auto idx = std::chrono::duration_cast<Hours>(floor_to_hour(t) - grid.t0).count();
        return (idx < 0 || idx >= grid.length) ? -1 : static_cast<Eigen::Index>(idx);
    };
    for (const auto& t : trips) {
        if (auto it = store.find(t.start_station); it != store.end())
            if (const auto i = slot(t.t_start); i >= 0) ++it->second.departures[i];
        if (auto it = store.find(t.end_station); it != store.end())
            if (const auto i = slot(t.t_end); i >= 0) ++it->second.arrivals[i];
    }
    return store;
}

std::vector<StationId> ClientPartition::stations_of(int client) const {
    std::vector<StationId> out;
    for (const auto& [s, c] : assignment)
        if (c == client) out.push_back(s);
    return out;
}

ClientPartition partition_clients(const std::set<StationId>& stations, int n_clients, PartitionMode mode,
                                  const std::map<StationId, int>* mapping) {
    if (n_clients < 1) throw ConfigError("n_clients must be >= 1");
    ClientPartition p;
    p.n_clients = n_clients;
    if (mode == PartitionMode::hash) {
        for (const auto& s : stations)
            p.assignment[s] = static_cast<int>(fnv1a64(s) % static_cast<std::uint64_t>(n_clients));
        return p;
    }
    if (mapping == nullptr) throw ConfigError("file partition mode requires a station mapping");
    for (const auto& s : stations) {
        const auto it = mapping->find(s);
        if (it == mapping->end()) throw ConfigError("partition file has no entry for station '" + s + "'");
        if (it->second < 0 || it->second >= n_clients)
            throw ConfigError("partition file assigns station '" + s + "' to client " +
                              std::to_string(it->second) + " outside [0, " + std::to_string(n_clients) + ")");
        p.assignment[s] = it->second;
    }
    return p;
}

TemporalSplit temporal_split(Eigen::Index series_len, const SplitFractions& f) {
    if (f.train < 0 || f.valid < 0 || f.test < 0 || std::abs(f.train + f.valid + f.test - 1.0) > 1e-9)
        throw ConfigError("split fractions must be non-negative and sum to 1");
    if (series_len < 10) throw DataError("series too short for a temporal split (need >= 10 hours)");
    // The epsilon keeps products such as 0.9 * 10 from flooring to 8.
    const auto L = static_cast<double>(series_len);
    TemporalSplit s;
    s.length = series_len;
    s.train_end = static_cast<Eigen::Index>(std::floor(f.train * L + 1e-9));
    s.valid_end = static_cast<Eigen::Index>(std::floor((f.train + f.valid) * L + 1e-9));
    if (s.train_end < 1 || s.valid_end <= s.train_end || s.valid_end >= series_len)
        throw DataError("split leaves an empty train, validation or test part");
    return s;
}

std::string demand_store_csv(const DemandStore& store) {
    std::ostringstream out;
    out << "station_id,hour_index,timestamp,arrivals,departures\n";
    for (const auto& [id, ds] : store) {
        for (Eigen::Index i = 0; i < ds.size(); ++i)
            out << id << ',' << i << ',' << format_timestamp(ds.time_at(i)) << ',' << ds.arrivals[i] << ','
                << ds.departures[i] << '\n';
    }
    return out.str();
}

DemandStore read_demand_store_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("demand store is empty");
    strip_cr(line);
    if (line != "station_id,hour_index,timestamp,arrivals,departures")
        throw SchemaError("unexpected demand store header: " + line);
    std::map<StationId, std::vector<std::array<std::int64_t, 2>>> rows;
    std::map<StationId, Timestamp> t0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        strip_cr(line);
        if (line.empty()) continue;
        const auto f = split_fields(line, ',');
        if (f.size() != 5) throw SchemaError("demand store line " + std::to_string(line_no) + ": expected 5 fields");
        auto& v = rows[f[0]];
        if (std::stoll(f[1]) != static_cast<std::int64_t>(v.size()))
            throw SchemaError("demand store line " + std::to_string(line_no) + ": non-contiguous hour_index");
        if (v.empty()) {
            Timestamp t;
            if (!parse_timestamp(f[2], t)) throw SchemaError("demand store line " + std::to_string(line_no));
            t0[f[0]] = t;
        }
        v.push_back({std::stoll(f[3]), std::stoll(f[4])});
    }
    DemandStore store;
    for (auto& [id, v] : rows) {
        DemandSeries ds;
        ds.station = id;
        ds.t0 = t0[id];
        ds.arrivals.resize(static_cast<Eigen::Index>(v.size()));
        ds.departures.resize(static_cast<Eigen::Index>(v.size()));
        for (std::size_t i = 0; i < v.size(); ++i) {
            ds.arrivals[static_cast<Eigen::Index>(i)] = v[i][0];
            ds.departures[static_cast<Eigen::Index>(i)] = v[i][1];
        }
        store.emplace(id, std::move(ds));
    }
    return store;
}

nlohmann::json clean_report_json(const CleanReport& r) {
    return {{"input", r.input},
            {"removed_duration", r.removed_duration},
            {"removed_negative", r.removed_negative},
            {"removed_short_roundtrip", r.removed_short_roundtrip},
            {"removed_inactive_station", r.removed_inactive_station},
            {"retained", r.retained},
            {"stations_dropped", r.stations_dropped}};
}

nlohmann::json partition_json(const ClientPartition& p) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [s, c] : p.assignment) j[s] = c;
    return j;
}

std::map<StationId, int> read_partition_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("partition file must be a JSON object");
    std::map<StationId, int> m;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_number_integer()) throw ConfigError("partition entry for '" + k + "' is not an integer");
        m[k] = v.get<int>();
    }
    return m;
}

}  // namespace bikefed
