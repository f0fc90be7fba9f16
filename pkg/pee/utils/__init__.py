from pee.utils import instrumentation, random, text, time
