"""One encoder for 2D radiographs and 3D volumes: packed tokens, 3D RoPE and SIGReg self-supervision."""

__version__ = "0.1.0"
