"""E2-style SRS channel transport and channel-charting localization."""

__version__ = "0.1.0"

SRS_POSITIONING_FUNCTION_ID = 148
SPEED_OF_LIGHT = 299_792_458.0
