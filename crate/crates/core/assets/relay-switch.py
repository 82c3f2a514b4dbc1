#!/usr/bin/env python3
# fnfleet: actions=on,off
# usage: relay-switch.py [gpio-pin]
# Mirrors the relay state file written by the device agent onto a GPIO pin.
import sys
import time

STATE = "/var/lib/fnfleet/relay.state"
pin = int(sys.argv[1]) if len(sys.argv) > 1 else 17
value = "/sys/class/gpio/gpio%d/value" % pin
while True:
    try:
        on = open(STATE).read().strip() == "on"
        with open(value, "w") as f:
            f.write("1" if on else "0")
    except OSError:
        pass
    time.sleep(1)
