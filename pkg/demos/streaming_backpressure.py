"""
Streaming with a bounded window
===============================

A push stream may have at most ``hwm`` batches that the receiver has not
consumed yet; after that ``push`` blocks.  The receiver only pulls a frame
when its prefetch queue has room, so a stalled consumer stalls the sender
instead of growing memory.
"""

import threading
import time

from emlio.receiver import Receiver, ReceiverConfig
from emlio.sender import encode_batch
from emlio.transport import BATCH, ChannelConfig, Frame, PushTimeout, open_push

payload = encode_batch([(bytes(64 * 1024), 1)] * 4, epoch=0, shard_id=0, batch_index=0)

with Receiver(ReceiverConfig(prefetch_depth=4)) as rx, \
        open_push(rx.address, ChannelConfig(hwm=16)) as stream:
    # Nobody is consuming yet, so the window and the queue both fill up.
    pushed = 0
    try:
        while True:
            stream.push(Frame(BATCH, payload), timeout=0.3)
            pushed += 1
    except PushTimeout:
        pass
    print(f"pushed {pushed} batches before blocking: "
          f"{stream.in_flight} in flight, {rx.queue.depth} decoded and queued")

    # Consuming one batch frees one slot end to end.
    rx.next()
    time.sleep(0.05)
    stream.push(Frame(BATCH, payload), timeout=1)
    print("one consumed, one more pushed; in flight:", stream.in_flight)

# With injected latency frames stay pipelined: 50 frames over a 20 ms link
# take about one delay plus the transfer time, not 50 round trips.
with Receiver(ReceiverConfig()) as rx, \
        open_push(rx.address, ChannelConfig(one_way_delay_ms=20)) as stream:
    t0 = time.perf_counter()
    sender = threading.Thread(target=lambda: [stream.push(Frame(BATCH, payload)) for _ in range(50)])
    sender.start()
    for _ in range(50):
        rx.next()
    sender.join()
    print(f"50 frames over a 20 ms link: {time.perf_counter() - t0:.3f} s")
