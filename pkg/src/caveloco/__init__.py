"""Camera-based in-place locomotion for a four-screen CAVE.

Calibrate the capture rig, track people per camera, fuse 3D skeletons,
recognise stepping gestures and stream movement commands over UDP.
"""

__version__ = "0.1.0"
