"""Second-order fabric grasping stack for a planar arm.

Modules:
  core       -- shared value types, SPD solves, seeded RNG streams
  diffnet    -- minimal differentiable feedforward networks (values,
                parameter/input gradients, mixed second order)
  fabric     -- fabric calculus: energization, term resolution, planner fabric
  integrator -- fixed-step second-order integration and rollouts
  env        -- planar arm, parametric objects, grasp geometry
  policy     -- neural fabric policy and MLP baseline
  encoder    -- point-set autoencoder (latent object encodings)
  datagen    -- grasp table and reverse-trajectory dataset generation
  expert     -- surrogate PD expert and on-policy imitation training
  pipeline   -- planner-in-the-loop episodes and evaluation reports
  cli        -- command-line entry points
"""

__version__ = "0.1.0"
