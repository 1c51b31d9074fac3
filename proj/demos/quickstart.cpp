// Evolve the static double peak with HADES, then steer a conditional run
// toward the third quadrant.

#include <cstdio>

#include <hades/conditioning.hpp>
#include <hades/evolution.hpp>
#include <hades/tasks.hpp>

int main()
{
    using namespace hades;

    const auto task = tasks::Task::double_peak({});

    evolution::EvoConfig cfg;
    cfg.population = 256;
    cfg.sigma_init = 0.5;
    cfg.elite_ratio = 0.15;
    cfg.selection_pressure = 10;
    cfg.weight_mode = evolution::WeightMode::normalized;
    cfg.hidden_layers = 3;
    cfg.hidden_units = 24;
    cfg.train.epochs = 100;
    cfg.seed = 7;

    std::puts("unconditional:");
    const auto plain = evolution::run_evolution(cfg, task, conditioning::ConditionScheme::none(), 8);
    for (const auto& r : plain.records)
        std::printf("  gen %2zu  f_max %.3f  f_mean %.3f\n", r.generation, r.f_max, r.f_mean);

    std::puts("conditioned on quadrant 3 (label -1):");
    cfg.sigma_init = 2.0;
    cfg.crossover_ratio = 0.125;
    cfg.selection_pressure = 5;
    cfg.train.lr = 1e-2;
    cfg.train.epochs = 200;
    const auto scheme = conditioning::ConditionScheme::quadrant(
        conditioning::ConditionSchedule::constant(Eigen::VectorXd::Constant(1, -1.0)));
    const auto steered = evolution::run_evolution(cfg, task, scheme, 8);
    for (const auto& r : steered.records)
        std::printf("  gen %2zu  f_max %.3f  mean label %+.2f\n", r.generation, r.f_max, r.condition_mean);
}
