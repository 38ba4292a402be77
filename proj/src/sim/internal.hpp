#pragma once

#include <vector>

#include "resflow/dataflow_sim.hpp"

namespace resflow::sim {

// Pool whose window covers the whole input: one output position.
bool is_global_pool(const LayerNode& n);

int layer_lanes(const Graph& g, const alloc::AllocationPlan& plan, const std::string& id);

// Window taps of a layer, ordered [ky][q]. q spans fw + (lanes-1)*stride
// columns; a tap lives on the lane whose pixels it sees.
std::vector<Tap> layer_taps(const LayerGeom& g, int lanes);

// Index of the tap's pixel within its lane's stream, relative to the window
// origin. Larger is newer.
int64_t tap_position(const LayerGeom& g, int lanes, const Tap& t);

}  // namespace resflow::sim
