import math

import numpy as np
import pytest

from drift_attrib.grid import GridSpec


def oracle_great_circle_km(lon1, lat1, lon2, lat2, radius=6371.0):
    """Independent great-circle distance via the atan2 form (not the
    package's haversine code path)."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    y = math.sqrt((math.cos(p2) * math.sin(dl)) ** 2
                  + (math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl)) ** 2)
    x = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return radius * math.atan2(y, x)


@pytest.fixture
def small_spec():
    return GridSpec(lon0=0.0, lat0=0.0, nlon=6, nlat=6, dlon=0.25, dlat=0.25)


@pytest.fixture
def open_mask(small_spec):
    return np.ones((small_spec.nlat, small_spec.nlon), dtype=bool)
