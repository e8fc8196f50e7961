"""MQTT 3.1.1 subset: wire codec, topic matching, broker and client."""
