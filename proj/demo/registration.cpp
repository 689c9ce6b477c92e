// Registers five simulated views of the triplets model in both modes and
// prints the pairwise rotation error of each.
#include <cstdlib>
#include <iostream>

#include "smlmreg/pipeline.hpp"

using namespace smlmreg;

int main(int argc, char** argv) {
    const double r = argc > 1 ? std::atof(argv[1]) : 10.0;
    const GroundTruthModel model = generate_triplets();

    AcquisitionSpec acq;
    acq.sigma = 0.01;
    acq.r = r;
    acq.rng_seed = 7;
    const SimulatedViews sim = simulate_views(model, acq);
    const auto init = perturb_rotations(sim.true_transforms, 30.0, 8);
    std::cout << "initial error: " << pairwise_error(init, sim.true_transforms, {9}).mean_deg << " deg\n";

    for (Mode mode : {Mode::proposed_sage, Mode::baseline_jrmpc}) {
        RegistrationConfig config;
        config.mode = mode;
        config.rng_seed = 9;
        const RestartSummary res = register_with_restarts(sim.clouds, init, config, 5);
        const ErrorReport err = pairwise_error(res.best.transforms, sim.true_transforms, {9});
        std::cout << to_string(mode) << ": " << err.mean_deg << " +/- " << err.std_deg << " deg, "
                  << res.best.iterations << " iterations\n";
    }
}
