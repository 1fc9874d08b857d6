"""Full-range BT.709 RGB <-> YUV conversion.

RGB lives in [0, 255]; YUV in [0, 1] with chroma centred on 0.5.
"""

import numpy as np

_KR, _KB = 0.2126, 0.0722
_KG = 1.0 - _KR - _KB

RGB_TO_YUV = np.array(
    [
        [_KR, _KG, _KB],
        [-_KR / (2 * (1 - _KB)), -_KG / (2 * (1 - _KB)), 0.5],
        [0.5, -_KG / (2 * (1 - _KR)), -_KB / (2 * (1 - _KR))],
    ]
)
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)
_OFFSET = np.array([0.0, 0.5, 0.5])


def rgb_to_yuv(rgb):
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    return rgb @ RGB_TO_YUV.T + _OFFSET


def yuv_to_rgb(yuv):
    yuv = np.asarray(yuv, dtype=np.float64) - _OFFSET
    return (yuv @ YUV_TO_RGB.T) * 255.0


def frame_to_yuv(frame):
    if frame.color_space == "yuv":
        return frame
    return frame.with_attrs(rgb_to_yuv(frame.attrs), "yuv")


def frame_to_rgb(frame, clip=True):
    if frame.color_space == "rgb":
        return frame
    rgb = yuv_to_rgb(frame.attrs)
    if clip:
        rgb = np.clip(rgb, 0.0, 255.0)
    return frame.with_attrs(rgb, "rgb")
