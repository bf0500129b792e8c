"""Slot-based occlusion reasoning and pedestrian tracking."""
from .beliefs import GaussianBelief, GridBelief, SupportGaussian, TiltedGaussian
from .regions import HiddenRegion, gaussian_region_moments
from .tracker import (ELBODecreaseError, ObservationSlot, PedestrianSlot, SceneBelief, StreamError, StreamFrame,
                      TrackerConfig, init_slots, make_observations, observation_flag, occlusion_polygons,
                      predict_step, read_history, run_filter, scene_elbo, update_step, write_history)

__all__ = [
    "ELBODecreaseError", "GaussianBelief", "GridBelief", "HiddenRegion", "ObservationSlot", "PedestrianSlot",
    "SceneBelief", "StreamError", "StreamFrame", "SupportGaussian", "TiltedGaussian", "TrackerConfig", "gaussian_region_moments",
    "init_slots", "make_observations", "observation_flag", "occlusion_polygons", "predict_step", "read_history",
    "run_filter", "scene_elbo", "update_step", "write_history",
]
