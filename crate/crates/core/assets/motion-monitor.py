#!/usr/bin/env python3
# fnfleet: sensor=motion
# usage: motion-monitor.py <port> [interval]
import json
import sys
import time
import urllib.request

STATE = "/var/lib/fnfleet"


def pin(port):
    with open("/sys/class/gpio/gpio%d/value" % port) as f:
        return int(f.read() or 0)


def push(url, device, value):
    ts = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    body = json.dumps({"device_id": device, "metric": "motion",
                       "samples": [{"timestamp": ts, "value": value}]})
    req = urllib.request.Request(url + "/telemetry", body.encode(),
                                 {"Content-Type": "application/json"})
    urllib.request.urlopen(req, timeout=5).close()


port = int(sys.argv[1])
interval = int(sys.argv[2]) if len(sys.argv) > 2 else 10
url = json.load(open(STATE + "/agent.json"))["control_plane"]
device = open(STATE + "/state/device-id").read().strip()
while True:
    try:
        push(url, device, pin(port))
    except OSError:
        pass
    time.sleep(interval)
