"""Line detection toolkit: an exact Fast Hough Transform, a lightweight
trainable network built around it, a synthetic dataset generator, a
classical HT+NMS baseline, and a precision/recall evaluation harness."""

__version__ = "0.1.0"
