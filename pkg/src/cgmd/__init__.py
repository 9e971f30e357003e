"""Clinical-graph guided distillation from a teacher cohort to a disjoint student cohort."""

__version__ = "0.1.0"
