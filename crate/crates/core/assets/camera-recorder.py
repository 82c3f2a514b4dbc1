#!/usr/bin/env python3
# fnfleet: actions=record
# Keeps the camera module loaded; the device agent serves the record action.
import os
import sys
import time

if not os.path.exists("/dev/video0"):
    sys.exit("no camera at /dev/video0")
while True:
    time.sleep(60)
